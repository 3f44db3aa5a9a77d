use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Per-query Gaussian predictive: marginal means and variances, plus the
/// full covariance when it was requested.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    #[serde(skip)]
    pub covariance: Option<Mat<f64>>,
}

impl PredictiveDistribution {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn std(&self) -> Vec<f64> {
        self.variance.iter().map(|v| v.sqrt()).collect()
    }
}

/// `log N(y | mean, var)`.
#[inline]
pub fn log_normal_pdf(y: f64, mean: f64, var: f64) -> f64 {
    let r = y - mean;
    -0.5 * (r * r / var + (2.0 * std::f64::consts::PI * var).ln())
}

/// Sum of per-point log predictive densities.
pub fn joint_log_density(pred: &PredictiveDistribution, y: &[f64]) -> f64 {
    y.iter()
        .zip(pred.mean.iter().zip(&pred.variance))
        .map(|(&y, (&m, &v))| log_normal_pdf(y, m, v))
        .sum()
}

/// A model that yields one observation-space predictive per mixture
/// component, with prior mixing weights for unseen data. Single-curve
/// models are the `K = 1` case.
pub trait ComponentPredictor {
    fn n_components(&self) -> usize;

    /// Predictive distributions including observation noise, one per
    /// component.
    fn component_predictives(&self, query: &[f64]) -> Result<Vec<PredictiveDistribution>>;

    fn query_weights(&self) -> Vec<f64>;
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Normalizes unnormalized log-masses into a probability vector.
pub fn normalize_log(log_mass: &[f64]) -> Vec<f64> {
    let max = log_mass.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return vec![1.0 / log_mass.len() as f64; log_mass.len()];
    }
    let total: f64 = log_mass.iter().map(|l| (l - max).exp()).sum();
    let lse = max + total.ln();
    log_mass.iter().map(|l| (l - lse).exp()).collect()
}

/// Posterior over the components for the `i`-th query given its target,
/// `P(k) ∝ w_k N(y | μ_k, v_k)`.
pub fn component_posterior(preds: &[PredictiveDistribution], weights: &[f64], i: usize, y: f64) -> Vec<f64> {
    let log_mass: Vec<f64> = preds
        .iter()
        .zip(weights)
        .map(|(p, &w)| w.ln() + log_normal_pdf(y, p.mean[i], p.variance[i]))
        .collect();
    normalize_log(&log_mass)
}
