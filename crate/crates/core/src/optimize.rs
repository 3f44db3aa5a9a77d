//! Box-constrained BFGS with central finite-difference gradients and
//! seeded multi-start.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functions::ParamInfo;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Number of starting points, the supplied initial guess included.
    pub restarts: usize,
    pub max_iters: usize,
    /// Stop when an accepted step changes the objective by less than this
    /// fraction of its magnitude.
    pub rel_tol: f64,
    /// Relative step of the central-difference stencil.
    pub fd_step: f64,
    /// Log-scale coordinates of restart points are drawn log-uniformly from
    /// `[p / spread, p · spread]` around the initial guess.
    pub restart_spread: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            restarts: 5,
            max_iters: 100,
            rel_tol: 1e-6,
            fd_step: 1e-5,
            restart_spread: 10.0,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn single_start(max_iters: usize) -> Self {
        Self {
            restarts: 1,
            max_iters,
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    /// Objective value after every accepted step, starting with the value
    /// at the (projected) initial point.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
}

struct Counted<'a, F> {
    f: &'a mut F,
    evals: usize,
}

impl<F: FnMut(&[f64]) -> Option<f64>> Counted<'_, F> {
    fn eval(&mut self, x: &[f64]) -> Option<f64> {
        self.evals += 1;
        (self.f)(x).filter(|v| v.is_finite())
    }
}

fn project(x: &mut [f64], info: &[ParamInfo]) {
    for (v, p) in x.iter_mut().zip(info) {
        *v = p.clamp(*v);
    }
}

/// Central-difference gradient; the stencil is clipped at the box so every
/// evaluation stays feasible.
pub fn fd_gradient<F>(f: &mut F, x: &[f64], fx: f64, info: &[ParamInfo], step: f64) -> Option<Vec<f64>>
where
    F: FnMut(&[f64]) -> Option<f64>,
{
    let mut g = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let h = step * x[i].abs().max(1.0);
        let hi = (x[i] + h).min(info[i].upper);
        let lo = (x[i] - h).max(info[i].lower);
        probe[i] = hi;
        let f_hi = f(&probe).filter(|v| v.is_finite());
        probe[i] = lo;
        let f_lo = f(&probe).filter(|v| v.is_finite());
        probe[i] = x[i];
        g[i] = match (f_hi, f_lo) {
            (Some(a), Some(b)) if hi > lo => (a - b) / (hi - lo),
            (Some(a), None) if hi > x[i] => (a - fx) / (hi - x[i]),
            (None, Some(b)) if lo < x[i] => (fx - b) / (x[i] - lo),
            (Some(_), Some(_)) => 0.0,
            _ => return None,
        };
    }
    Some(g)
}

/// Local minimization from one starting point.
pub fn minimize<F>(f: &mut F, x0: &[f64], info: &[ParamInfo], cfg: &OptimizerConfig) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> Option<f64>,
{
    assert_eq!(x0.len(), info.len(), "parameter/bounds length mismatch");
    let n = x0.len();
    let mut obj = Counted { f, evals: 0 };
    let mut x = x0.to_vec();
    project(&mut x, info);
    let mut fx = obj
        .eval(&x)
        .ok_or_else(|| Error::OptimizationFailed("objective undefined at the starting point".into()))?;
    let mut trace = vec![fx];
    if n == 0 {
        return Ok(Minimum {
            x,
            value: fx,
            trace,
            iterations: 0,
            evaluations: obj.evals,
        });
    }

    let mut h_inv = identity(n);
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None; // (s, g_old)
    let mut iterations = 0;

    while iterations < cfg.max_iters {
        iterations += 1;
        let mut eval = |p: &[f64]| obj.eval(p);
        let Some(g) = fd_gradient(&mut eval, &x, fx, info, cfg.fd_step) else {
            break;
        };

        if let Some((s, g_old)) = prev.take() {
            let y: Vec<f64> = g.iter().zip(&g_old).map(|(a, b)| a - b).collect();
            bfgs_update(&mut h_inv, &s, &y, iterations == 2);
        }

        let active: Vec<bool> = (0..n)
            .map(|i| (x[i] <= info[i].lower && g[i] > 0.0) || (x[i] >= info[i].upper && g[i] < 0.0))
            .collect();
        if g.iter().zip(&active).all(|(gi, a)| *a || gi.abs() < 1e-12) {
            break;
        }

        let mut accepted = None;
        for attempt in 0..2 {
            let mut d = mat_vec(&h_inv, &g);
            for i in 0..n {
                d[i] = if active[i] { 0.0 } else { -d[i] };
            }
            let slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
            if !(slope < 0.0) || attempt == 1 {
                h_inv = identity(n);
                d = (0..n).map(|i| if active[i] { 0.0 } else { -g[i] }).collect();
            }
            let mut t = if iterations == 1 || attempt == 1 {
                let gmax = d.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
                (1.0 / gmax.max(1e-12)).min(1.0)
            } else {
                1.0
            };
            for _ in 0..40 {
                let mut cand: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
                project(&mut cand, info);
                let decrease: f64 = g.iter().zip(cand.iter().zip(&x)).map(|(gi, (c, xi))| gi * (c - xi)).sum();
                if let Some(fc) = obj.eval(&cand) {
                    if fc <= fx + 1e-4 * decrease && fc <= fx {
                        accepted = Some((cand, fc));
                        break;
                    }
                }
                t *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
        }

        let Some((x_new, f_new)) = accepted else {
            break;
        };
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let change = fx - f_new;
        x = x_new;
        fx = f_new;
        trace.push(fx);
        prev = Some((s, g));
        if change <= cfg.rel_tol * fx.abs().max(1.0) {
            break;
        }
    }

    Ok(Minimum {
        x,
        value: fx,
        trace,
        iterations,
        evaluations: obj.evals,
    })
}

/// Runs [`minimize`] from the initial guess and `cfg.restarts - 1`
/// perturbed starts, returning the best local minimum.
pub fn minimize_with_restarts<F>(
    f: &mut F,
    x0: &[f64],
    info: &[ParamInfo],
    cfg: &OptimizerConfig,
) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> Option<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let spread = cfg.restart_spread.max(1.0).ln();
    let mut best: Option<Minimum> = None;
    let mut last_err = None;
    for r in 0..cfg.restarts.max(1) {
        let mut start = x0.to_vec();
        if r > 0 {
            for (v, p) in start.iter_mut().zip(info) {
                if p.log_scale && spread > 0.0 {
                    *v += rng.random_range(-spread..spread);
                }
            }
            project(&mut start, info);
        }
        match minimize(f, &start, info, cfg) {
            Ok(m) => {
                if best.as_ref().is_none_or(|b| m.value < b.value) {
                    best = Some(m);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| {
        last_err.unwrap_or_else(|| Error::OptimizationFailed("no restart succeeded".into()))
    })
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], rescale: bool) {
    let sy: f64 = s.iter().zip(y).map(|(a, b)| a * b).sum();
    if !(sy > 1e-12) {
        return;
    }
    let n = s.len();
    if rescale {
        let yy: f64 = y.iter().map(|v| v * v).sum();
        let gamma = sy / yy;
        for (i, row) in h.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = if i == j { gamma } else { 0.0 };
            }
        }
    }
    let rho = 1.0 / sy;
    let hy = mat_vec(h, y);
    let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
    for i in 0..n {
        for j in 0..n {
            h[i][j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}
