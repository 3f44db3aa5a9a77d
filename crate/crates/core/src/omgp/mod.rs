//! Overlapping mixture of Gaussian processes trained by variational EM on
//! the corrected (marginalised) lower bound.

mod factor;
mod prior;

use std::sync::Arc;

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::FactorCache;
use crate::hetgp::{empirical_log_noise, fit_noise_process, predict_noise, HetGpConfig, NoiseProcess};
use crate::numerics::log_sum_exp;
use crate::optimize::{minimize_with_restarts, OptimizerConfig};
use crate::predictive::{argmax, component_posterior, ComponentPredictor, PredictiveDistribution};

use factor::{b_diag, ComponentFactor};
pub use factor::RESPONSIBILITY_FLOOR;
pub use prior::{ComponentPrior, OmgpPrior, Responsibilities};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OmgpConfig {
    pub max_inner: usize,
    /// Relative bound change that ends an E-step.
    pub e_tolerance: f64,
    pub max_em: usize,
    /// Relative change of the post-M-step bound that ends EM.
    pub em_tolerance: f64,
    /// Half-width of the uniform perturbation of the initial
    /// responsibilities.
    pub init_perturbation: f64,
    pub seed: u64,
    /// Optimizer for the M-step.
    pub optimizer: OptimizerConfig,
    /// Components with fewer MAP points keep the shared noise level in a
    /// heteroscedastic update.
    pub het_min_points: usize,
    /// Settings for the per-component noise processes.
    pub het: HetGpConfig,
}

impl Default for OmgpConfig {
    fn default() -> Self {
        Self {
            max_inner: 50,
            e_tolerance: 1e-6,
            max_em: 30,
            em_tolerance: 1e-5,
            init_perturbation: 0.05,
            seed: 0,
            optimizer: OptimizerConfig::single_start(100),
            het_min_points: 10,
            het: HetGpConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Posteriors recomputed after the noise model changed.
    Refresh,
    E,
    M,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub round: usize,
    pub phase: Phase,
    pub bound: f64,
}

/// `q(f⁽ᵏ⁾)` summarized by its mean and marginal variances at the
/// training inputs.
#[derive(Debug, Clone)]
pub struct ComponentPosterior {
    pub post_mean: Vec<f64>,
    pub post_var: Vec<f64>,
    pub b_diag: Vec<f64>,
    factor: Arc<ComponentFactor>,
    alpha: Vec<f64>,
    quad: f64,
    log_det: f64,
}

/// A fitted (or initialized) mixture.
#[derive(Debug, Clone)]
pub struct OmgpModel {
    pub prior: OmgpPrior,
    pub responsibilities: Responsibilities,
    pub components: Vec<ComponentPosterior>,
    train_x: Vec<f64>,
    train_y: Vec<f64>,
    pub bound_trace: Vec<TraceEntry>,
    pub noise_processes: Option<Vec<NoiseProcess>>,
    noise_var: Vec<Vec<f64>>,
}

/// Per-component predictives plus the query mixing weights.
#[derive(Debug, Clone)]
pub struct OmgpPrediction {
    pub components: Vec<PredictiveDistribution>,
    pub weights: Vec<f64>,
}

/// Component posterior for one query and its MAP index.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPosterior {
    pub probabilities: Vec<f64>,
    pub map: usize,
}

fn component_noise(prior: &OmgpPrior, noise: &Option<Vec<NoiseProcess>>, x: &[f64]) -> Vec<Vec<f64>> {
    let k = prior.k_components();
    match noise {
        Some(nps) => nps.iter().map(|np| predict_noise(np, x)).collect(),
        None => vec![vec![prior.shared_noise_std.powi(2); x.len()]; k],
    }
}

fn residual(c: &ComponentPrior, x: &[f64], y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(&xi, &yi)| yi - c.mean.eval(xi)).collect()
}

fn build_posterior(
    x: &[f64],
    y: &[f64],
    c: &ComponentPrior,
    pi_col: &[f64],
    noise: &[f64],
) -> Result<ComponentPosterior> {
    let b = b_diag(pi_col, noise);
    let factor = ComponentFactor::build(x, &c.kernel, &b)?;
    let resid = residual(c, x, y);
    let (quad, log_det) = factor.quad_and_log_det(&resid)?;
    let alpha = factor.alpha(&resid)?;
    let latent = factor.latent(x, &c.mean, &c.kernel, &alpha, x, false)?;
    Ok(ComponentPosterior {
        post_mean: latent.mean,
        post_var: latent.variance,
        b_diag: b,
        factor: Arc::new(factor),
        alpha,
        quad,
        log_det,
    })
}

impl OmgpModel {
    /// Builds the component posteriors implied by the given
    /// responsibilities and hyperparameters.
    pub fn new(
        x: &[f64],
        y: &[f64],
        prior: OmgpPrior,
        responsibilities: Responsibilities,
        noise_processes: Option<Vec<NoiseProcess>>,
    ) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} inputs for {} targets",
                x.len(),
                y.len()
            )));
        }
        prior.validate(Some(x.len()))?;
        let k = prior.k_components();
        if responsibilities.n_points() != x.len() || responsibilities.n_components() != k {
            return Err(Error::DimensionMismatch(format!(
                "responsibilities are {}x{}, expected {}x{k}",
                responsibilities.n_points(),
                responsibilities.n_components(),
                x.len()
            )));
        }
        if let Some(nps) = &noise_processes {
            if nps.len() != k {
                return Err(Error::DimensionMismatch(format!(
                    "{} noise processes for {k} components",
                    nps.len()
                )));
            }
        }
        let noise_var = component_noise(&prior, &noise_processes, x);
        let mut model = Self {
            prior,
            responsibilities,
            components: Vec::new(),
            train_x: x.to_vec(),
            train_y: y.to_vec(),
            bound_trace: Vec::new(),
            noise_processes,
            noise_var,
        };
        model.components = update_component_posteriors(&model, &model.responsibilities)?;
        Ok(model)
    }

    pub fn train_x(&self) -> &[f64] {
        &self.train_x
    }

    pub fn train_y(&self) -> &[f64] {
        &self.train_y
    }

    pub fn k_components(&self) -> usize {
        self.prior.k_components()
    }

    /// Observation-noise variances `σ²_ik` at the training inputs.
    pub fn noise_variance(&self, k: usize) -> &[f64] {
        &self.noise_var[k]
    }

    /// Full posterior covariance `Σ⁽ᵏ⁾` over the training inputs.
    pub fn component_covariance(&self, k: usize) -> Result<Mat<f64>> {
        let c = &self.prior.component_priors[k];
        let post = &self.components[k];
        let latent = post
            .factor
            .latent(&self.train_x, &c.mean, &c.kernel, &post.alpha, &self.train_x, true)?;
        Ok(latent.covariance.expect("requested covariance"))
    }

    pub fn final_bound(&self) -> f64 {
        self.bound_trace
            .last()
            .map(|t| t.bound)
            .unwrap_or_else(|| corrected_lower_bound(self))
    }

    fn with_state(&self, prior: OmgpPrior, responsibilities: Responsibilities) -> Result<Self> {
        let mut next = Self {
            prior,
            responsibilities,
            components: Vec::new(),
            train_x: self.train_x.clone(),
            train_y: self.train_y.clone(),
            bound_trace: self.bound_trace.clone(),
            noise_processes: self.noise_processes.clone(),
            noise_var: Vec::new(),
        };
        next.noise_var = component_noise(&next.prior, &next.noise_processes, &next.train_x);
        next.components = update_component_posteriors(&next, &next.responsibilities)?;
        Ok(next)
    }

    fn last_round(&self) -> usize {
        self.bound_trace.last().map(|t| t.round).unwrap_or(0)
    }
}

fn responsibilities_from_moments(model: &OmgpModel, moments: &[(Vec<f64>, Vec<f64>)]) -> Responsibilities {
    let n = model.train_x.len();
    let k = model.k_components();
    let mut pi_hat = Vec::with_capacity(n * k);
    let mut log_row = vec![0.0; k];
    for i in 0..n {
        for (j, lr) in log_row.iter_mut().enumerate() {
            let (mean, var) = &moments[j];
            let s2 = model.noise_var[j][i];
            let d = model.train_y[i] - mean[i];
            *lr = model.prior.log_train_prior(i, j)
                - (d * d + var[i]) / (2.0 * s2)
                - 0.5 * (LN_2PI + s2.ln());
        }
        let lse = log_sum_exp(&log_row).expect("at least one component");
        pi_hat.extend(log_row.iter().map(|l| (l - lse).exp()));
    }
    Responsibilities::from_rows_unchecked(n, k, pi_hat)
}

/// `Π̂[i,k] ∝ Π[i,k]·exp(a_ik)` with
/// `a_ik = −((y_i − μ_ik)² + Σ_ii)/(2σ²_ik) − ½ log(2π σ²_ik)`.
pub fn update_responsibilities(model: &OmgpModel) -> Responsibilities {
    let moments: Vec<(Vec<f64>, Vec<f64>)> = model
        .components
        .iter()
        .map(|c| (c.post_mean.clone(), c.post_var.clone()))
        .collect();
    responsibilities_from_moments(model, &moments)
}

/// The responsibility update with every `q(f⁽ᵏ⁾)` at its prior.
pub fn responsibilities_from_prior(model: &OmgpModel) -> Responsibilities {
    let moments: Vec<(Vec<f64>, Vec<f64>)> = model
        .prior
        .component_priors
        .iter()
        .map(|c| (c.mean.eval_many(&model.train_x), vec![c.kernel.variance(); model.train_x.len()]))
        .collect();
    responsibilities_from_moments(model, &moments)
}

/// `Σ⁽ᵏ⁾ = (K⁻¹ + B⁽ᵏ⁾)⁻¹`, `μ⁽ᵏ⁾ = m + Σ⁽ᵏ⁾B⁽ᵏ⁾(y − m)` via the
/// `B^½`-symmetrized identity, for every component.
pub fn update_component_posteriors(model: &OmgpModel, resp: &Responsibilities) -> Result<Vec<ComponentPosterior>> {
    (0..model.k_components())
        .into_par_iter()
        .map(|k| {
            build_posterior(
                &model.train_x,
                &model.train_y,
                &model.prior.component_priors[k],
                &resp.column(k),
                &model.noise_var[k],
            )
        })
        .collect()
}

/// `KL(q(Z) ‖ p(Z)) = Σ Π̂ log(Π̂/Π)`, with `0·log 0 = 0`.
fn kl_assignments(prior: &OmgpPrior, resp: &Responsibilities) -> f64 {
    let k = resp.n_components();
    let mut kl = 0.0;
    for (i, row) in resp.rows().enumerate() {
        for (j, &p) in row.iter().enumerate().take(k) {
            if p > 0.0 {
                kl += p * (p.ln() - prior.log_train_prior(i, j));
            }
        }
    }
    kl
}

fn noise_normalizer(resp: &Responsibilities, noise_var: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for (i, row) in resp.rows().enumerate() {
        for (j, &p) in row.iter().enumerate() {
            s += p * (LN_2PI + noise_var[j][i].ln());
        }
    }
    0.5 * s
}

/// `Σ_k[−½‖L⁻¹B^½(y − m)‖² − Σ_i log L_ii] − KL(q‖p) − ½Σ Π̂ log(2πσ²_ik)`
/// with `L = chol(I + B^½ K B^½)`.
pub fn corrected_lower_bound(model: &OmgpModel) -> f64 {
    let fit: f64 = model
        .components
        .iter()
        .map(|c| -0.5 * c.quad - 0.5 * c.log_det)
        .sum();
    fit - kl_assignments(&model.prior, &model.responsibilities)
        - noise_normalizer(&model.responsibilities, &model.noise_var)
}

/// Mean-field updates (responsibilities, then posteriors) until the bound
/// settles. The posteriors held by `model` must be current for its
/// responsibilities and hyperparameters.
pub fn e_step(model: OmgpModel, cfg: &OmgpConfig) -> Result<OmgpModel> {
    let round = model.last_round();
    let mut model = model;
    let mut bound = corrected_lower_bound(&model);
    for _ in 0..cfg.max_inner {
        let resp = update_responsibilities(&model);
        model.components = update_component_posteriors(&model, &resp)?;
        model.responsibilities = resp;
        let next = corrected_lower_bound(&model);
        model.bound_trace.push(TraceEntry {
            round,
            phase: Phase::E,
            bound: next,
        });
        if next < bound - 1e-9 {
            log::warn!("e-step bound decreased from {bound} to {next}");
        }
        let converged = (next - bound).abs() <= cfg.e_tolerance * bound.abs().max(1.0);
        bound = next;
        if converged {
            break;
        }
    }
    Ok(model)
}

/// Maximizes the corrected bound over every component's mean and kernel
/// hyperparameters (and σ unless noise is heteroscedastic) with `Π̂`
/// frozen.
pub fn m_step(model: OmgpModel, opt: &OptimizerConfig) -> Result<OmgpModel> {
    let learn_noise = model.noise_processes.is_none();
    let k = model.k_components();
    let x = &model.train_x;
    let y = &model.train_y;
    let cols: Vec<Vec<f64>> = (0..k).map(|j| model.responsibilities.column(j)).collect();
    let kl = kl_assignments(&model.prior, &model.responsibilities);
    let slices = model.prior.kernel_slices();
    let fixed_normalizer = noise_normalizer(&model.responsibilities, &model.noise_var);
    let mut caches: Vec<FactorCache<ComponentFactor>> = (0..k).map(|_| FactorCache::new(2)).collect();

    let mut objective = |p: &[f64]| -> Option<f64> {
        let prior = model.prior.with_params(p, learn_noise);
        let s2 = prior.shared_noise_std.powi(2);
        let mut total = 0.0;
        for j in 0..k {
            let c = &prior.component_priors[j];
            let (start, len) = slices[j];
            let mut key = p[start..start + len].to_vec();
            if learn_noise {
                key.push(p[p.len() - 1]);
            }
            let factor = caches[j]
                .get_or_try(&key, || {
                    let b = if learn_noise {
                        b_diag(&cols[j], &vec![s2; x.len()])
                    } else {
                        b_diag(&cols[j], &model.noise_var[j])
                    };
                    ComponentFactor::build(x, &c.kernel, &b)
                })
                .ok()?;
            let (quad, log_det) = factor.quad_and_log_det(&residual(c, x, y)).ok()?;
            total += -0.5 * quad - 0.5 * log_det;
        }
        let normalizer = if learn_noise {
            0.5 * (LN_2PI + s2.ln()) * x.len() as f64
        } else {
            fixed_normalizer
        };
        Some(-(total - kl - normalizer))
    };
    let p0 = model.prior.params(learn_noise);
    let info = model.prior.param_info(learn_noise);
    let min = minimize_with_restarts(&mut objective, &p0, &info, opt)?;
    let prior = model.prior.with_params(&min.x, learn_noise);
    let round = model.last_round();
    let mut next = model.with_state(prior, model.responsibilities.clone())?;
    next.bound_trace.push(TraceEntry {
        round,
        phase: Phase::M,
        bound: corrected_lower_bound(&next),
    });
    Ok(next)
}

/// Perturbed-uniform responsibilities: `1/K + U(−δ, δ)` per entry, rows
/// renormalized.
pub fn perturbed_uniform(n: usize, k: usize, delta: f64, seed: u64) -> Responsibilities {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = 1.0 / k as f64;
    let mut pi = Vec::with_capacity(n * k);
    for _ in 0..n {
        let row: Vec<f64> = (0..k)
            .map(|_| {
                let e = if delta > 0.0 { rng.random_range(-delta..delta) } else { 0.0 };
                (base + e).max(1e-6)
            })
            .collect();
        let s: f64 = row.iter().sum();
        pi.extend(row.into_iter().map(|v| v / s));
    }
    Responsibilities::from_rows_unchecked(n, k, pi)
}

/// Variational EM: E-step, then alternating M- and E-steps until the
/// post-M-step bound settles.
pub fn fit_omgp(x: &[f64], y: &[f64], prior: &OmgpPrior, cfg: &OmgpConfig) -> Result<OmgpModel> {
    let k = prior.k_components();
    if x.len() < 5 * k || x.len() != y.len() {
        return Err(Error::InsufficientData(format!(
            "{k} components need at least {} paired observations, got {} inputs and {} targets",
            5 * k,
            x.len(),
            y.len()
        )));
    }
    let init = perturbed_uniform(x.len(), k, cfg.init_perturbation, cfg.seed);
    let model = OmgpModel::new(x, y, prior.clone(), init, None)?;
    // q(f) starts at the priors, so the first update sees the prior means.
    let first = responsibilities_from_prior(&model);
    let mut model = model.with_state(prior.clone(), first)?;
    model.bound_trace.push(TraceEntry {
        round: 0,
        phase: Phase::E,
        bound: corrected_lower_bound(&model),
    });
    let mut model = e_step(model, cfg)?;
    let mut last_m: Option<f64> = None;
    for round in 1..=cfg.max_em {
        let opt = cfg.optimizer.clone().with_seed(cfg.optimizer.seed.wrapping_add(round as u64));
        let mark = model.bound_trace.len();
        model = m_step(model, &opt)?;
        let after_m = corrected_lower_bound(&model);
        model = e_step(model, cfg)?;
        for t in &mut model.bound_trace[mark..] {
            t.round = round;
        }
        log::debug!("em round {round}: bound {:.6}", model.final_bound());
        if let Some(prev) = last_m {
            if (after_m - prev).abs() <= cfg.em_tolerance * prev.abs().max(1.0) {
                break;
            }
        }
        last_m = Some(after_m);
    }
    Ok(model)
}

/// Per-component latent predictive at `query`, optionally with noise.
pub fn omgp_predict_latent(
    model: &OmgpModel,
    query: &[f64],
    include_noise: bool,
    full_cov: bool,
) -> Result<Vec<PredictiveDistribution>> {
    let noise = if include_noise {
        Some(component_noise(&model.prior, &model.noise_processes, query))
    } else {
        None
    };
    (0..model.k_components())
        .map(|k| {
            let c = &model.prior.component_priors[k];
            let post = &model.components[k];
            let mut pred = post
                .factor
                .latent(&model.train_x, &c.mean, &c.kernel, &post.alpha, query, full_cov)?;
            if let Some(noise) = &noise {
                for (v, r) in pred.variance.iter_mut().zip(&noise[k]) {
                    *v += r;
                }
                if let Some(cov) = pred.covariance.as_mut() {
                    for (i, r) in noise[k].iter().enumerate() {
                        cov[(i, i)] += r;
                    }
                }
            }
            Ok(pred)
        })
        .collect()
}

/// Observation-space predictive of every component with the query weights.
pub fn omgp_predict(model: &OmgpModel, query: &[f64]) -> Result<OmgpPrediction> {
    Ok(OmgpPrediction {
        components: omgp_predict_latent(model, query, true, false)?,
        weights: model.prior.query_prior_pi.clone(),
    })
}

/// MAP component of every training point.
pub fn classify_train(model: &OmgpModel) -> Vec<usize> {
    model.responsibilities.rows().map(argmax).collect()
}

/// `P(k* | x*, y*)` from the query prior and per-component predictives.
pub fn classify_posterior(model: &OmgpModel, x_star: f64, y_star: f64) -> Result<ClassPosterior> {
    let pred = omgp_predict(model, &[x_star])?;
    let probabilities = component_posterior(&pred.components, &pred.weights, 0, y_star);
    let map = argmax(&probabilities);
    Ok(ClassPosterior { probabilities, map })
}

impl ComponentPredictor for OmgpModel {
    fn n_components(&self) -> usize {
        self.k_components()
    }

    fn component_predictives(&self, query: &[f64]) -> Result<Vec<PredictiveDistribution>> {
        omgp_predict_latent(self, query, true, false)
    }

    fn query_weights(&self) -> Vec<f64> {
        self.prior.query_prior_pi.clone()
    }
}

/// Fits one log-noise process per component on its MAP-assigned points,
/// rebuilds `B⁽ᵏ⁾ = Π̂/r⁽ᵏ⁾` over all points and re-runs the E-step.
pub fn heteroscedastic_update(model: OmgpModel, cfg: &OmgpConfig) -> Result<OmgpModel> {
    let labels = classify_train(&model);
    let log_s2 = model.prior.shared_noise_std.powi(2).ln();
    let mut nps = Vec::with_capacity(model.k_components());
    for k in 0..model.k_components() {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
        if idx.len() < cfg.het_min_points {
            log::warn!(
                "component {k} has {} MAP points (< {}); keeping the shared noise level",
                idx.len(),
                cfg.het_min_points
            );
            nps.push(NoiseProcess::constant(log_s2));
            continue;
        }
        let post = &model.components[k];
        let xs: Vec<f64> = idx.iter().map(|&i| model.train_x[i]).collect();
        let ys: Vec<f64> = idx.iter().map(|&i| model.train_y[i]).collect();
        let pred = PredictiveDistribution {
            mean: idx.iter().map(|&i| post.post_mean[i]).collect(),
            variance: idx
                .iter()
                .map(|&i| post.post_var[i] + model.noise_var[k][i])
                .collect(),
            covariance: None,
        };
        let het: &HetGpConfig = &cfg.het;
        let g = empirical_log_noise(&pred, &ys, het.samples, het.seed.wrapping_add(k as u64))?;
        nps.push(fit_noise_process(&xs, &g, &het.noise_optimizer(k as u64))?);
    }
    let mut next = model;
    next.noise_processes = Some(nps);
    next.noise_var = component_noise(&next.prior, &next.noise_processes, &next.train_x);
    next.components = update_component_posteriors(&next, &next.responsibilities)?;
    next.bound_trace.push(TraceEntry {
        round: next.last_round(),
        phase: Phase::Refresh,
        bound: corrected_lower_bound(&next),
    });
    e_step(next, cfg)
}

#[cfg(test)]
mod tests;
