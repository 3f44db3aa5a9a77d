use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functions::{
    ConstantKernel, KernelSpec, MeanSpec, ParamInfo, SoftClipMean, SquaredExponentialKernel,
    NOISE_STD_RANGE,
};
use crate::data::quantile_sorted;
use crate::gp::{median, population_std, GpPrior, MeanKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentPrior {
    pub mean: MeanSpec,
    pub kernel: KernelSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmgpPrior {
    pub component_priors: Vec<ComponentPrior>,
    pub shared_noise_std: f64,
    /// Row-major `N × K` prior over training assignments; `None` is uniform.
    pub train_prior_pi: Option<Vec<f64>>,
    pub query_prior_pi: Vec<f64>,
}

impl OmgpPrior {
    /// Uniform assignment priors over the given components.
    pub fn new(component_priors: Vec<ComponentPrior>, shared_noise_std: f64) -> Result<Self> {
        let k = component_priors.len();
        if k == 0 {
            return Err(Error::InvalidConfig("at least one component is required".into()));
        }
        let p = Self {
            component_priors,
            shared_noise_std,
            train_prior_pi: None,
            query_prior_pi: vec![1.0 / k as f64; k],
        };
        p.validate(None)?;
        Ok(p)
    }

    /// Data-driven prior: one soft-clip component for `K = 1`; otherwise
    /// `K − 1` soft-clip components plus a zero-mean constant-kernel
    /// component for zero output.
    ///
    /// The soft-clip curves share one rising flank, estimated from the
    /// upper envelope of the data, and level off at plateaus found by
    /// clustering the outputs beyond the rated point. Without a usable
    /// flank the plateaus are spread evenly below `max(y)`.
    pub fn template(x: &[f64], y: &[f64], k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidConfig("at least one component is required".into()));
        }
        let base = GpPrior::default_for(x, y, MeanKind::SoftClip);
        if k == 1 {
            return Self::new(
                vec![ComponentPrior {
                    mean: base.mean,
                    kernel: base.kernel,
                }],
                base.noise_std,
            );
        }
        let sy = population_std(y).max(1e-3);
        let MeanSpec::SoftClip(sc) = base.mean else { unreachable!() };
        let KernelSpec::SquaredExponential(se) = base.kernel else { unreachable!() };
        let residual_kernel = KernelSpec::SquaredExponential(SquaredExponentialKernel {
            process_std: 0.1 * sy,
            length_scale: se.length_scale,
        });
        let curves = k - 1;
        let means: Vec<SoftClipMean> = match rising_flank(x, y) {
            Some((cut_in, slope, top)) => {
                let rated = cut_in + top / slope;
                let mut plateau: Vec<f64> = x.iter().zip(y).filter(|(&xi, _)| xi > rated).map(|(_, &yi)| yi).collect();
                if plateau.len() < 5 * k {
                    let mid = median(x);
                    plateau = x.iter().zip(y).filter(|(&xi, _)| xi >= mid).map(|(_, &yi)| yi).collect();
                }
                let floor = 0.05 * top;
                kmeans_1d(&plateau, k)
                    .into_iter()
                    .take(curves)
                    .map(|level| {
                        let alpha1 = level.max(floor);
                        let alpha2 = slope / alpha1;
                        SoftClipMean {
                            alpha1,
                            alpha2,
                            alpha3: -alpha2 * cut_in,
                            beta: sc.beta,
                        }
                    })
                    .collect()
            }
            None => (0..curves)
                .map(|j| SoftClipMean {
                    alpha1: sc.alpha1 * (1.0 - j as f64 / curves as f64),
                    ..sc
                })
                .collect(),
        };
        let mut comps: Vec<ComponentPrior> = means
            .into_iter()
            .map(|m| ComponentPrior {
                mean: MeanSpec::SoftClip(m),
                kernel: residual_kernel,
            })
            .collect();
        comps.push(ComponentPrior {
            mean: MeanSpec::Zero,
            kernel: KernelSpec::Constant(ConstantKernel {
                level: (0.1 * sy).powi(2),
            }),
        });
        Self::new(comps, (0.05 * sy).clamp(NOISE_STD_RANGE.0, NOISE_STD_RANGE.1))
    }

    pub fn k_components(&self) -> usize {
        self.component_priors.len()
    }

    /// Checks hyperparameters and priors; `n` is the training-set size when
    /// a per-row prior must be checked against it.
    pub fn validate(&self, n: Option<usize>) -> Result<()> {
        let k = self.k_components();
        if k == 0 {
            return Err(Error::InvalidConfig("at least one component is required".into()));
        }
        for c in &self.component_priors {
            c.mean.validate()?;
            c.kernel.validate()?;
        }
        if !(self.shared_noise_std > 0.0) || !self.shared_noise_std.is_finite() {
            return Err(Error::InvalidHyperparameter(format!(
                "shared noise std must be positive, got {}",
                self.shared_noise_std
            )));
        }
        check_simplex(&self.query_prior_pi, k, 1e-12, "query prior")?;
        if let Some(pi) = &self.train_prior_pi {
            if let Some(n) = n {
                if pi.len() != n * k {
                    return Err(Error::DimensionMismatch(format!(
                        "training prior has {} entries, expected {n}x{k}",
                        pi.len()
                    )));
                }
            }
            if pi.len() % k != 0 {
                return Err(Error::DimensionMismatch("training prior is not N x K".into()));
            }
            for row in pi.chunks(k) {
                check_simplex(row, k, 1e-12, "training prior row")?;
            }
        }
        Ok(())
    }

    /// Every hyperparameter perturbed by a relative amount drawn from
    /// `U(−scale, scale)`, clamped to its bounds.
    pub fn jittered(&self, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let info = self.param_info(true);
        let p: Vec<f64> = self
            .params(true)
            .iter()
            .zip(&info)
            .map(|(&v, inf)| {
                let u = if scale > 0.0 { rng.random_range(-scale..scale) } else { 0.0 };
                let moved = if inf.log_scale { v + u } else { v * (1.0 + u) };
                inf.clamp(moved)
            })
            .collect();
        self.with_params(&p, true)
    }

    pub(crate) fn log_train_prior(&self, i: usize, k: usize) -> f64 {
        match &self.train_prior_pi {
            Some(pi) => pi[i * self.k_components() + k].ln(),
            None => -(self.k_components() as f64).ln(),
        }
    }

    pub(crate) fn params(&self, learn_noise: bool) -> Vec<f64> {
        let mut p = Vec::new();
        for c in &self.component_priors {
            p.extend(c.mean.params());
            p.extend(c.kernel.params());
        }
        if learn_noise {
            p.push(self.shared_noise_std.ln());
        }
        p
    }

    pub(crate) fn param_info(&self, learn_noise: bool) -> Vec<ParamInfo> {
        let mut p = Vec::new();
        for c in &self.component_priors {
            p.extend(c.mean.param_info());
            p.extend(c.kernel.param_info());
        }
        if learn_noise {
            p.push(ParamInfo::log_bounded(NOISE_STD_RANGE.0, NOISE_STD_RANGE.1));
        }
        p
    }

    /// Offsets of each component's kernel parameters within the parameter
    /// vector, as `(start, len)`.
    pub(crate) fn kernel_slices(&self) -> Vec<(usize, usize)> {
        let mut at = 0;
        self.component_priors
            .iter()
            .map(|c| {
                let start = at + c.mean.n_params();
                at = start + c.kernel.n_params();
                (start, c.kernel.n_params())
            })
            .collect()
    }

    pub(crate) fn with_params(&self, p: &[f64], learn_noise: bool) -> Self {
        let mut at = 0;
        let component_priors = self
            .component_priors
            .iter()
            .map(|c| {
                let nm = c.mean.n_params();
                let nk = c.kernel.n_params();
                let out = ComponentPrior {
                    mean: c.mean.with_params(&p[at..at + nm]),
                    kernel: c.kernel.with_params(&p[at + nm..at + nm + nk]),
                };
                at += nm + nk;
                out
            })
            .collect();
        Self {
            component_priors,
            shared_noise_std: if learn_noise { p[at].exp() } else { self.shared_noise_std },
            train_prior_pi: self.train_prior_pi.clone(),
            query_prior_pi: self.query_prior_pi.clone(),
        }
    }
}

/// `(cut_in, slope, top)` of the line through the rising part of the upper
/// envelope (binned 90th percentile) of the data, where `top` is the
/// envelope maximum.
fn rising_flank(x: &[f64], y: &[f64]) -> Option<(f64, f64, f64)> {
    let n = x.len();
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if n < 20 || !(hi > lo) {
        return None;
    }
    let bins = (n / 50).clamp(5, 30);
    let width = (hi - lo) / bins as f64;
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); bins];
    for (&xi, &yi) in x.iter().zip(y) {
        let b = (((xi - lo) / width) as usize).min(bins - 1);
        members[b].push(yi);
    }
    let envelope: Vec<(f64, f64)> = members
        .iter_mut()
        .enumerate()
        .filter(|(_, m)| m.len() >= 5)
        .map(|(b, m)| {
            m.sort_by(f64::total_cmp);
            (lo + (b as f64 + 0.5) * width, quantile_sorted(m, 0.9))
        })
        .collect();
    let top = envelope.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
    if !(top > 0.0) {
        return None;
    }
    let first_top = envelope.iter().position(|e| e.1 >= 0.85 * top)?;
    let rising: Vec<(f64, f64)> = envelope[..=first_top]
        .iter()
        .copied()
        .filter(|e| e.1 >= 0.15 * top && e.1 <= 0.85 * top)
        .collect();
    if rising.len() < 2 {
        return None;
    }
    let m = rising.len() as f64;
    let mx = rising.iter().map(|e| e.0).sum::<f64>() / m;
    let my = rising.iter().map(|e| e.1).sum::<f64>() / m;
    let sxy: f64 = rising.iter().map(|e| (e.0 - mx) * (e.1 - my)).sum();
    let sxx: f64 = rising.iter().map(|e| (e.0 - mx) * (e.0 - mx)).sum();
    let slope = sxy / sxx;
    if !(slope > 0.0) || !slope.is_finite() {
        return None;
    }
    Some((mx - my / slope, slope, top))
}

/// Lloyd's algorithm in one dimension, started from evenly spaced
/// quantiles. Centres are returned in decreasing order.
fn kmeans_1d(v: &[f64], k: usize) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.is_empty() {
        return vec![0.0; k];
    }
    let mut centres: Vec<f64> = (0..k)
        .map(|j| quantile_sorted(&sorted, (j as f64 + 0.5) / k as f64))
        .collect();
    for _ in 0..100 {
        let mut sum = vec![0.0; k];
        let mut count = vec![0usize; k];
        for &a in &sorted {
            let j = (0..k)
                .min_by(|&i, &j| (a - centres[i]).abs().total_cmp(&(a - centres[j]).abs()))
                .expect("k > 0");
            sum[j] += a;
            count[j] += 1;
        }
        let next: Vec<f64> = (0..k)
            .map(|j| if count[j] > 0 { sum[j] / count[j] as f64 } else { centres[j] })
            .collect();
        let moved = next.iter().zip(&centres).any(|(a, b)| a != b);
        centres = next;
        if !moved {
            break;
        }
    }
    centres.sort_by(|a, b| b.total_cmp(a));
    centres
}

fn check_simplex(v: &[f64], k: usize, tol: f64, what: &str) -> Result<()> {
    if v.len() != k {
        return Err(Error::InvalidSimplex(format!("{what} has length {}, expected {k}", v.len())));
    }
    if v.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
        return Err(Error::InvalidSimplex(format!("{what} has negative or non-finite entries")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > tol {
        return Err(Error::InvalidSimplex(format!("{what} sums to {s}")));
    }
    Ok(())
}

/// Variational assignment posterior `Π̂`, stored row-major `N × K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Responsibilities {
    n: usize,
    k: usize,
    pi_hat: Vec<f64>,
}

impl Responsibilities {
    pub fn new(n: usize, k: usize, pi_hat: Vec<f64>) -> Result<Self> {
        if k == 0 || pi_hat.len() != n * k {
            return Err(Error::DimensionMismatch(format!(
                "{} responsibilities for {n} points and {k} components",
                pi_hat.len()
            )));
        }
        for row in pi_hat.chunks(k) {
            check_simplex(row, k, 1e-9, "responsibility row")?;
        }
        Ok(Self { n, k, pi_hat })
    }

    pub fn uniform(n: usize, k: usize) -> Self {
        Self {
            n,
            k,
            pi_hat: vec![1.0 / k as f64; n * k],
        }
    }

    pub(crate) fn from_rows_unchecked(n: usize, k: usize, pi_hat: Vec<f64>) -> Self {
        Self { n, k, pi_hat }
    }

    pub fn n_points(&self) -> usize {
        self.n
    }

    pub fn n_components(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.pi_hat[i * self.k + k]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.pi_hat[i * self.k..(i + 1) * self.k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.pi_hat.chunks(self.k)
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, k)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.pi_hat
    }
}
