//! Single-curve Gaussian-process regression with an explicit prior mean.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functions::{
    gram_matrix, gram_symmetric, KernelSpec, MeanSpec, ParamInfo, SoftClipMean,
    SquaredExponentialKernel, NOISE_STD_RANGE, PROCESS_STD_RANGE,
};
use crate::numerics::{cholesky_factor, dot, log_det, SpdFactorization};
use crate::optimize::{minimize_with_restarts, Minimum, OptimizerConfig};
use crate::predictive::{joint_log_density, ComponentPredictor, PredictiveDistribution};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Relative jitter ceiling used when factorizing `K + R`.
pub(crate) fn max_jitter_for(diag_scale: f64) -> f64 {
    1e-6 * diag_scale.max(1e-12)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpPrior {
    pub mean: MeanSpec,
    pub kernel: KernelSpec,
    /// Homoscedastic observation noise σ.
    pub noise_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeanKind {
    Zero,
    Constant,
    SoftClip,
}

impl GpPrior {
    pub fn new(mean: MeanSpec, kernel: KernelSpec, noise_std: f64) -> Result<Self> {
        let p = Self {
            mean,
            kernel,
            noise_std,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.mean.validate()?;
        self.kernel.validate()?;
        if !(self.noise_std > 0.0) || !self.noise_std.is_finite() {
            return Err(Error::InvalidHyperparameter(format!(
                "noise_std must be positive, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }

    /// Data-driven starting point: σ_f = std(y), l = span(x)/10,
    /// σ = 0.1·std(y); a soft-clip mean starts with α₁ = max(y),
    /// α₂ = 4/span(x) and the half-height point at median(x).
    pub fn default_for(x: &[f64], y: &[f64], mean: MeanKind) -> Self {
        let sy = population_std(y).max(1e-3);
        let span = span(x).max(1e-3);
        let mean = match mean {
            MeanKind::Zero => MeanSpec::Zero,
            MeanKind::Constant => MeanSpec::Constant {
                level: if y.is_empty() { 0.0 } else { y.iter().sum::<f64>() / y.len() as f64 },
            },
            MeanKind::SoftClip => {
                let alpha2 = 4.0 / span;
                MeanSpec::SoftClip(SoftClipMean {
                    alpha1: y.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(1e-3),
                    alpha2,
                    alpha3: 0.5 - alpha2 * median(x),
                    beta: 10.0,
                })
            }
        };
        let kernel = KernelSpec::SquaredExponential(SquaredExponentialKernel {
            process_std: sy.clamp(PROCESS_STD_RANGE.0, PROCESS_STD_RANGE.1),
            length_scale: span / 10.0,
        });
        Self {
            mean,
            kernel,
            noise_std: (0.1 * sy).clamp(NOISE_STD_RANGE.0, NOISE_STD_RANGE.1),
        }
    }

    pub(crate) fn params(&self, learn_noise: bool) -> Vec<f64> {
        let mut p = self.mean.params();
        p.extend(self.kernel.params());
        if learn_noise {
            p.push(self.noise_std.ln());
        }
        p
    }

    pub(crate) fn param_info(&self, learn_noise: bool) -> Vec<ParamInfo> {
        let mut p = self.mean.param_info();
        p.extend(self.kernel.param_info());
        if learn_noise {
            p.push(ParamInfo::log_bounded(NOISE_STD_RANGE.0, NOISE_STD_RANGE.1));
        }
        p
    }

    pub(crate) fn with_params(&self, p: &[f64], learn_noise: bool) -> Self {
        let nm = self.mean.n_params();
        let nk = self.kernel.n_params();
        Self {
            mean: self.mean.with_params(&p[..nm]),
            kernel: self.kernel.with_params(&p[nm..nm + nk]),
            noise_std: if learn_noise { p[nm + nk].exp() } else { self.noise_std },
        }
    }
}

pub(crate) fn population_std(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt()
}

fn span(v: &[f64]) -> f64 {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if v.is_empty() {
        0.0
    } else {
        hi - lo
    }
}

pub(crate) fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Conditioned latent process: `K_xx + R` factorized and the weight vector
/// `(K_xx + R)⁻¹ (y − m)` cached.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    mean: MeanSpec,
    kernel: KernelSpec,
    train_x: Vec<f64>,
    train_y: Vec<f64>,
    noise_var: Vec<f64>,
    chol: Arc<SpdFactorization>,
    residual: Vec<f64>,
    weights: Vec<f64>,
}

impl GpPosterior {
    pub fn new(
        x: &[f64],
        y: &[f64],
        mean: MeanSpec,
        kernel: KernelSpec,
        noise_var: Vec<f64>,
    ) -> Result<Self> {
        if x.len() != y.len() || x.len() != noise_var.len() {
            return Err(Error::DimensionMismatch(format!(
                "x, y and noise have lengths {}, {}, {}",
                x.len(),
                y.len(),
                noise_var.len()
            )));
        }
        let chol = Arc::new(factorize_system(x, &kernel, &noise_var)?);
        Self::with_factor(x, y, mean, kernel, noise_var, chol)
    }

    fn with_factor(
        x: &[f64],
        y: &[f64],
        mean: MeanSpec,
        kernel: KernelSpec,
        noise_var: Vec<f64>,
        chol: Arc<SpdFactorization>,
    ) -> Result<Self> {
        let residual: Vec<f64> = x.iter().zip(y).map(|(&xi, &yi)| yi - mean.eval(xi)).collect();
        let weights = chol.solve_vec(&residual)?;
        Ok(Self {
            mean,
            kernel,
            train_x: x.to_vec(),
            train_y: y.to_vec(),
            noise_var,
            chol,
            residual,
            weights,
        })
    }

    pub fn train_x(&self) -> &[f64] {
        &self.train_x
    }

    pub fn train_y(&self) -> &[f64] {
        &self.train_y
    }

    pub fn noise_var(&self) -> &[f64] {
        &self.noise_var
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn factorization(&self) -> &SpdFactorization {
        &self.chol
    }

    pub fn mean_fn(&self) -> &MeanSpec {
        &self.mean
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    /// Negative log marginal likelihood of the conditioned data.
    pub fn nlml(&self) -> f64 {
        let n = self.train_x.len() as f64;
        0.5 * dot(&self.residual, &self.weights) + 0.5 * log_det(&self.chol) + 0.5 * n * LN_2PI
    }

    /// Posterior mean of the latent function only.
    pub fn latent_mean(&self, query: &[f64]) -> Vec<f64> {
        query
            .iter()
            .map(|&q| {
                self.mean.eval(q)
                    + self
                        .train_x
                        .iter()
                        .zip(&self.weights)
                        .map(|(&xi, w)| self.kernel.eval(q, xi) * w)
                        .sum::<f64>()
            })
            .collect()
    }

    /// Posterior of the latent function (no observation noise).
    pub fn latent(&self, query: &[f64], full_cov: bool) -> Result<PredictiveDistribution> {
        let m = query.len();
        let mut mean: Vec<f64> = query.iter().map(|&x| self.mean.eval(x)).collect();
        let prior_var = self.kernel.variance();
        if self.train_x.is_empty() {
            let covariance = full_cov.then(|| gram_symmetric(query, &self.kernel));
            return Ok(PredictiveDistribution {
                mean,
                variance: vec![prior_var; m],
                covariance,
            });
        }
        let mut v = gram_matrix(&self.train_x, query, &self.kernel);
        for (j, mj) in mean.iter_mut().enumerate() {
            *mj += v.col(j).iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>();
        }
        self.chol.half_solve_in_place(&mut v)?;
        let variance = (0..m)
            .map(|j| {
                let q: f64 = v.col(j).iter().map(|z| z * z).sum();
                (prior_var - q).max(0.0)
            })
            .collect();
        let covariance = full_cov.then(|| {
            let kss = gram_symmetric(query, &self.kernel);
            &kss - v.transpose() * &v
        });
        Ok(PredictiveDistribution {
            mean,
            variance,
            covariance,
        })
    }
}

fn factorize_system(x: &[f64], kernel: &KernelSpec, noise_var: &[f64]) -> Result<SpdFactorization> {
    let mut a = gram_symmetric(x, kernel);
    for (i, r) in noise_var.iter().enumerate() {
        a[(i, i)] += r;
    }
    let scale = kernel.variance() + noise_var.iter().copied().fold(0.0, f64::max);
    cholesky_factor(a.as_ref(), max_jitter_for(scale))
}

/// A fitted homoscedastic GP.
#[derive(Debug, Clone)]
pub struct GpModel {
    pub prior: GpPrior,
    posterior: GpPosterior,
    /// Objective values over accepted optimizer steps of the winning start.
    pub fit_trace: Vec<f64>,
}

impl GpModel {
    /// Conditions a GP on data with fixed hyperparameters.
    pub fn condition(prior: GpPrior, x: &[f64], y: &[f64]) -> Result<Self> {
        prior.validate()?;
        let noise = vec![prior.noise_std * prior.noise_std; x.len()];
        Ok(Self {
            prior,
            posterior: GpPosterior::new(x, y, prior.mean, prior.kernel, noise)?,
            fit_trace: Vec::new(),
        })
    }

    pub fn posterior(&self) -> &GpPosterior {
        &self.posterior
    }

    pub fn train_x(&self) -> &[f64] {
        self.posterior.train_x()
    }

    pub fn train_y(&self) -> &[f64] {
        self.posterior.train_y()
    }

    pub fn weights(&self) -> &[f64] {
        self.posterior.weights()
    }

    pub fn nlml(&self) -> f64 {
        self.posterior.nlml()
    }

    pub fn joint_log_likelihood(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let pred = gp_predict(self, x, true)?;
        Ok(joint_log_density(&pred, y))
    }
}

/// Predictive mean and variance at `query`; with `include_noise` the
/// homoscedastic noise σ² is added to every variance.
pub fn gp_predict(model: &GpModel, query: &[f64], include_noise: bool) -> Result<PredictiveDistribution> {
    gp_predict_full(model, query, include_noise, false)
}

pub fn gp_predict_full(
    model: &GpModel,
    query: &[f64],
    include_noise: bool,
    full_cov: bool,
) -> Result<PredictiveDistribution> {
    let mut pred = model.posterior.latent(query, full_cov)?;
    if include_noise {
        let s2 = model.prior.noise_std * model.prior.noise_std;
        pred.variance.iter_mut().for_each(|v| *v += s2);
        if let Some(c) = pred.covariance.as_mut() {
            for i in 0..c.nrows() {
                c[(i, i)] += s2;
            }
        }
    }
    Ok(pred)
}

impl ComponentPredictor for GpModel {
    fn n_components(&self) -> usize {
        1
    }

    fn component_predictives(&self, query: &[f64]) -> Result<Vec<PredictiveDistribution>> {
        Ok(vec![gp_predict(self, query, true)?])
    }

    fn query_weights(&self) -> Vec<f64> {
        vec![1.0]
    }
}

/// `½(y−m)ᵀ(K+σ²I)⁻¹(y−m) + ½log|K+σ²I| + (N/2)log 2π`.
pub fn nlml(prior: &GpPrior, x: &[f64], y: &[f64]) -> Result<f64> {
    prior.validate()?;
    let noise = vec![prior.noise_std * prior.noise_std; x.len()];
    Ok(GpPosterior::new(x, y, prior.mean, prior.kernel, noise)?.nlml())
}

/// Small cache of factorizations keyed by the exact bit pattern of the
/// parameters they depend on; finite-difference probes of mean
/// hyperparameters hit it.
pub(crate) struct FactorCache<T> {
    entries: Vec<(Vec<u64>, Arc<T>)>,
    capacity: usize,
}

impl<T> FactorCache<T> {
    pub(crate) fn new(capacity: usize) -> Self {
        Self {
            entries: Vec::new(),
            capacity,
        }
    }

    pub(crate) fn get_or_try<F>(&mut self, key: &[f64], build: F) -> Result<Arc<T>>
    where
        F: FnOnce() -> Result<T>,
    {
        let bits: Vec<u64> = key.iter().map(|v| v.to_bits()).collect();
        if let Some(pos) = self.entries.iter().position(|(k, _)| *k == bits) {
            let entry = self.entries.remove(pos);
            let value = entry.1.clone();
            self.entries.insert(0, entry);
            return Ok(value);
        }
        let value = Arc::new(build()?);
        self.entries.insert(0, (bits, value.clone()));
        self.entries.truncate(self.capacity);
        Ok(value)
    }
}

/// Observation-noise treatment during type-II maximum likelihood.
#[derive(Debug, Clone)]
pub(crate) enum NoiseFit<'a> {
    /// Learn the shared σ along with the other hyperparameters.
    Learned,
    /// Hold per-point noise variances fixed.
    Fixed(&'a [f64]),
}

pub(crate) struct FitOutcome {
    pub prior: GpPrior,
    pub posterior: GpPosterior,
    pub minimum: Minimum,
}

pub(crate) fn fit_latent(
    x: &[f64],
    y: &[f64],
    init: &GpPrior,
    noise: NoiseFit<'_>,
    opt: &OptimizerConfig,
) -> Result<FitOutcome> {
    let learn_noise = matches!(noise, NoiseFit::Learned);
    let noise_for = |p: &GpPrior| -> Vec<f64> {
        match &noise {
            NoiseFit::Learned => vec![p.noise_std * p.noise_std; x.len()],
            NoiseFit::Fixed(v) => v.to_vec(),
        }
    };
    let info = init.param_info(learn_noise);
    let nm = init.mean.n_params();
    let mut cache: FactorCache<SpdFactorization> = FactorCache::new(3);
    let mut objective = |p: &[f64]| -> Option<f64> {
        let prior = init.with_params(p, learn_noise);
        let chol = cache
            .get_or_try(&p[nm..], || factorize_system(x, &prior.kernel, &noise_for(&prior)))
            .ok()?;
        let post =
            GpPosterior::with_factor(x, y, prior.mean, prior.kernel, Vec::new(), chol).ok()?;
        Some(post.nlml())
    };
    let minimum = minimize_with_restarts(&mut objective, &init.params(learn_noise), &info, opt)?;
    let prior = init.with_params(&minimum.x, learn_noise);
    let posterior = GpPosterior::new(x, y, prior.mean, prior.kernel, noise_for(&prior))?;
    Ok(FitOutcome {
        prior,
        posterior,
        minimum,
    })
}

/// Type-II maximum likelihood over all hyperparameters (mean, kernel and
/// σ), multi-start quasi-Newton with finite-difference gradients.
pub fn fit_gp(x: &[f64], y: &[f64], prior_init: &GpPrior, opt: &OptimizerConfig) -> Result<GpModel> {
    if x.len() < 2 || x.len() != y.len() {
        return Err(Error::InsufficientData(format!(
            "fit_gp needs at least two paired observations, got {} inputs and {} targets",
            x.len(),
            y.len()
        )));
    }
    prior_init.validate()?;
    let out = fit_latent(x, y, prior_init, NoiseFit::Learned, opt)?;
    Ok(GpModel {
        prior: out.prior,
        posterior: out.posterior,
        fit_trace: out.minimum.trace,
    })
}
