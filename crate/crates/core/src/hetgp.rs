//! Most-likely heteroscedastic GP: a second GP over log-noise levels,
//! alternated with refits of the main process.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functions::{
    KernelSpec, MeanSpec, SquaredExponentialKernel, NOISE_STD_RANGE, PROCESS_STD_RANGE,
};
use crate::gp::{fit_gp, fit_latent, population_std, GpPosterior, GpPrior, NoiseFit};
use crate::optimize::OptimizerConfig;
use crate::predictive::{joint_log_density, ComponentPredictor, PredictiveDistribution};

/// Floor on empirical noise variances before taking logs.
pub const NOISE_VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HetGpConfig {
    /// Predictive samples per point when estimating empirical noise.
    pub samples: usize,
    pub max_outer: usize,
    /// Relative change in joint log-likelihood that ends the loop.
    pub tolerance: f64,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    /// Optimizer for the log-noise process; defaults to `optimizer`.
    pub noise_optimizer: Option<OptimizerConfig>,
}

impl Default for HetGpConfig {
    fn default() -> Self {
        Self {
            samples: 100,
            max_outer: 10,
            tolerance: 1e-4,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            noise_optimizer: None,
        }
    }
}

impl HetGpConfig {
    pub(crate) fn noise_optimizer(&self, round: u64) -> OptimizerConfig {
        let base = self.noise_optimizer.as_ref().unwrap_or(&self.optimizer);
        base.clone().with_seed(base.seed.wrapping_add(round))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NoiseProcessRecord {
    mean_level: f64,
    kernel: SquaredExponentialKernel,
    noise_std: f64,
    train_x: Vec<f64>,
    train_g: Vec<f64>,
}

/// GP over `g(x) = log r(x)` with a constant mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "NoiseProcessRecord", into = "NoiseProcessRecord")]
pub struct NoiseProcess {
    mean_level: f64,
    kernel: SquaredExponentialKernel,
    noise_std: f64,
    posterior: GpPosterior,
}

impl TryFrom<NoiseProcessRecord> for NoiseProcess {
    type Error = Error;

    fn try_from(r: NoiseProcessRecord) -> Result<Self> {
        NoiseProcess::new(r.mean_level, r.kernel, r.noise_std, &r.train_x, &r.train_g)
    }
}

impl From<NoiseProcess> for NoiseProcessRecord {
    fn from(p: NoiseProcess) -> Self {
        Self {
            mean_level: p.mean_level,
            kernel: p.kernel,
            noise_std: p.noise_std,
            train_x: p.posterior.train_x().to_vec(),
            train_g: p.posterior.train_y().to_vec(),
        }
    }
}

impl NoiseProcess {
    pub fn new(
        mean_level: f64,
        kernel: SquaredExponentialKernel,
        noise_std: f64,
        train_x: &[f64],
        train_g: &[f64],
    ) -> Result<Self> {
        let prior = GpPrior::new(
            MeanSpec::Constant { level: mean_level },
            KernelSpec::SquaredExponential(kernel),
            noise_std,
        )?;
        let noise = vec![noise_std * noise_std; train_x.len()];
        let posterior = GpPosterior::new(train_x, train_g, prior.mean, prior.kernel, noise)?;
        Ok(Self {
            mean_level,
            kernel,
            noise_std,
            posterior,
        })
    }

    /// A process with no data, so `r(x) = exp(log_variance)` everywhere.
    pub fn constant(log_variance: f64) -> Self {
        Self::new(
            log_variance,
            SquaredExponentialKernel {
                process_std: 1.0,
                length_scale: 1.0,
            },
            1.0,
            &[],
            &[],
        )
        .expect("empty noise process is always valid")
    }

    pub fn mean_level(&self) -> f64 {
        self.mean_level
    }

    pub fn kernel(&self) -> &SquaredExponentialKernel {
        &self.kernel
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn train_x(&self) -> &[f64] {
        self.posterior.train_x()
    }

    pub fn train_g(&self) -> &[f64] {
        self.posterior.train_y()
    }

    /// Posterior mean of the log-noise at `query`.
    pub fn log_noise(&self, query: &[f64]) -> Vec<f64> {
        self.posterior.latent_mean(query)
    }
}

/// `r(x*) = exp(E[g(x*)])`.
pub fn predict_noise(np: &NoiseProcess, query: &[f64]) -> Vec<f64> {
    np.log_noise(query).into_iter().map(f64::exp).collect()
}

/// Monte-Carlo estimate `g′ᵢ = log((1/s) Σⱼ ½(yᵢ − ỹᵢ⁽ʲ⁾)²)` with
/// `ỹᵢ⁽ʲ⁾` drawn from the per-point predictive. Point `i` uses stream `i`
/// of the seeded generator, so results do not depend on scheduling.
pub fn empirical_log_noise(
    pred: &PredictiveDistribution,
    y: &[f64],
    s: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if s == 0 {
        return Err(Error::InvalidConfig("sample count s must be at least 1".into()));
    }
    if pred.len() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictive points for {} targets",
            pred.len(),
            y.len()
        )));
    }
    Ok((0..y.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let sd = pred.variance[i].max(0.0).sqrt();
            let acc: f64 = (0..s)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let d = y[i] - (pred.mean[i] + sd * z);
                    0.5 * d * d
                })
                .sum();
            (acc / s as f64).max(NOISE_VARIANCE_FLOOR).ln()
        })
        .collect())
}

/// Type-II ML fit of a constant-mean SE-kernel GP on `(x, g′)`.
pub fn fit_noise_process(x: &[f64], g_prime: &[f64], opt: &OptimizerConfig) -> Result<NoiseProcess> {
    if x.len() != g_prime.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} inputs for {} log-noise values",
            x.len(),
            g_prime.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::InsufficientData("noise process needs at least one point".into()));
    }
    let level = g_prime.iter().sum::<f64>() / g_prime.len() as f64;
    let sg = population_std(g_prime).max(1e-2);
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let kernel = SquaredExponentialKernel {
        process_std: sg.clamp(PROCESS_STD_RANGE.0, PROCESS_STD_RANGE.1),
        length_scale: ((hi - lo) / 5.0).max(1e-2),
    };
    let noise_std = (0.5 * sg).clamp(NOISE_STD_RANGE.0, NOISE_STD_RANGE.1);
    if x.len() == 1 {
        return NoiseProcess::new(level, kernel, noise_std, x, g_prime);
    }
    let init = GpPrior::new(
        MeanSpec::Constant { level },
        KernelSpec::SquaredExponential(kernel),
        noise_std,
    )?;
    let fit = fit_latent(x, g_prime, &init, NoiseFit::Learned, opt)?;
    let MeanSpec::Constant { level } = fit.prior.mean else { unreachable!() };
    let KernelSpec::SquaredExponential(kernel) = fit.prior.kernel else { unreachable!() };
    NoiseProcess::new(level, kernel, fit.prior.noise_std, x, g_prime)
}

/// A GP whose observation noise `R = diag(r(xᵢ))` comes from a
/// [`NoiseProcess`].
#[derive(Debug, Clone)]
pub struct HetGpModel {
    /// Mean and kernel of the f-process; `noise_std` keeps the σ of the
    /// initial homoscedastic fit.
    pub prior: GpPrior,
    f_process: GpPosterior,
    pub noise_process: NoiseProcess,
    /// Joint log-likelihood of the training data after the homoscedastic
    /// fit and after every outer iteration.
    pub history: Vec<f64>,
}

impl HetGpModel {
    /// Conditions the f-process on `(x, y)` with noise from `noise_process`.
    pub fn from_parts(prior: GpPrior, x: &[f64], y: &[f64], noise_process: NoiseProcess) -> Result<Self> {
        prior.validate()?;
        let r = predict_noise(&noise_process, x);
        let f_process = GpPosterior::new(x, y, prior.mean, prior.kernel, r)?;
        Ok(Self {
            prior,
            f_process,
            noise_process,
            history: Vec::new(),
        })
    }

    pub fn f_process(&self) -> &GpPosterior {
        &self.f_process
    }

    pub fn train_x(&self) -> &[f64] {
        self.f_process.train_x()
    }

    pub fn train_y(&self) -> &[f64] {
        self.f_process.train_y()
    }

    /// Training-point noise variances `r(xᵢ)`.
    pub fn train_noise(&self) -> &[f64] {
        self.f_process.noise_var()
    }

    pub fn joint_log_likelihood(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        Ok(joint_log_density(&hetgp_predict(self, x, true)?, y))
    }
}

/// Predictive of the f-process; `include_noise` adds `r(x*)`.
pub fn hetgp_predict(model: &HetGpModel, query: &[f64], include_noise: bool) -> Result<PredictiveDistribution> {
    let mut pred = model.f_process.latent(query, false)?;
    if include_noise {
        for (v, r) in pred.variance.iter_mut().zip(predict_noise(&model.noise_process, query)) {
            *v += r;
        }
    }
    Ok(pred)
}

impl ComponentPredictor for HetGpModel {
    fn n_components(&self) -> usize {
        1
    }

    fn component_predictives(&self, query: &[f64]) -> Result<Vec<PredictiveDistribution>> {
        Ok(vec![hetgp_predict(self, query, true)?])
    }

    fn query_weights(&self) -> Vec<f64> {
        vec![1.0]
    }
}

/// Alternates: homoscedastic fit, empirical log-noise, noise-process fit,
/// refit under fixed `R`, repeat. Returns the iterate with the best joint
/// log-likelihood of the training data.
pub fn fit_hetgp(x: &[f64], y: &[f64], prior_init: &GpPrior, cfg: &HetGpConfig) -> Result<HetGpModel> {
    if x.len() < 10 || x.len() != y.len() {
        return Err(Error::InsufficientData(format!(
            "heteroscedastic fit needs at least 10 paired observations, got {} inputs and {} targets",
            x.len(),
            y.len()
        )));
    }
    let g1 = fit_gp(x, y, prior_init, &cfg.optimizer)?;
    let s2 = g1.prior.noise_std * g1.prior.noise_std;
    let mut current = HetGpModel {
        prior: g1.prior,
        f_process: g1.posterior().clone(),
        noise_process: NoiseProcess::constant(s2.ln()),
        history: Vec::new(),
    };
    let mut jll = current.joint_log_likelihood(x, y)?;
    let mut history = vec![jll];
    let mut best = (jll, current.clone());
    for round in 0..cfg.max_outer {
        let pred = hetgp_predict(&current, x, true)?;
        let g = empirical_log_noise(&pred, y, cfg.samples, cfg.seed.wrapping_add(round as u64))?;
        let noise_process = fit_noise_process(x, &g, &cfg.noise_optimizer(round as u64))?;
        let r = predict_noise(&noise_process, x);
        let refit = fit_latent(x, y, &current.prior, NoiseFit::Fixed(&r), &cfg.optimizer)?;
        let next = HetGpModel {
            prior: refit.prior,
            f_process: refit.posterior,
            noise_process,
            history: Vec::new(),
        };
        let next_jll = next.joint_log_likelihood(x, y)?;
        log::debug!("hetgp round {round}: joint log-likelihood {next_jll:.6}");
        history.push(next_jll);
        if next_jll > best.0 {
            best = (next_jll, next.clone());
        }
        let converged = (next_jll - jll).abs() <= cfg.tolerance * jll.abs().max(1.0);
        current = next;
        jll = next_jll;
        if converged {
            break;
        }
    }
    let mut model = best.1;
    model.history = history;
    Ok(model)
}
