use faer::Mat;

use crate::error::Result;
use crate::functions::{gram_matrix, gram_symmetric, KernelSpec, MeanSpec};
use crate::gp::max_jitter_for;
use crate::numerics::{cholesky_factor, log_det, RankOneSpd, SpdFactorization};
use crate::predictive::PredictiveDistribution;

/// Responsibilities below this value drop out of `B`.
pub const RESPONSIBILITY_FLOOR: f64 = 1e-12;

/// Queries are processed in blocks of this many columns.
const QUERY_BLOCK: usize = 2048;

/// `A = I + B^½ K B^½` for one component, factorized.
///
/// Points whose responsibility is below [`RESPONSIBILITY_FLOOR`] carry no
/// weight, so the dense variant only factorizes the active subset.
#[derive(Debug, Clone)]
pub(crate) enum ComponentFactor {
    Dense {
        active: Vec<usize>,
        /// `B^½` restricted to `active`.
        sqrt_b: Vec<f64>,
        chol: SpdFactorization,
    },
    /// Constant kernel `K = c·𝟙𝟙ᵀ`.
    RankOne { sqrt_b: Vec<f64>, system: RankOneSpd },
}

pub(crate) fn b_diag(pi_col: &[f64], noise: &[f64]) -> Vec<f64> {
    pi_col
        .iter()
        .zip(noise)
        .map(|(&p, &r)| if p >= RESPONSIBILITY_FLOOR { p / r } else { 0.0 })
        .collect()
}

impl ComponentFactor {
    pub(crate) fn build(x: &[f64], kernel: &KernelSpec, b: &[f64]) -> Result<Self> {
        match kernel {
            KernelSpec::Constant(c) => {
                let sqrt_b: Vec<f64> = b.iter().map(|v| v.sqrt()).collect();
                let system = RankOneSpd::new(c.level, sqrt_b.clone())?;
                Ok(Self::RankOne { sqrt_b, system })
            }
            KernelSpec::SquaredExponential(_) => {
                let active: Vec<usize> = (0..b.len()).filter(|&i| b[i] > 0.0).collect();
                let sqrt_b: Vec<f64> = active.iter().map(|&i| b[i].sqrt()).collect();
                let xa: Vec<f64> = active.iter().map(|&i| x[i]).collect();
                let mut a = gram_symmetric(&xa, kernel);
                let mut max_diag: f64 = 1.0;
                for j in 0..xa.len() {
                    for i in 0..xa.len() {
                        a[(i, j)] *= sqrt_b[i] * sqrt_b[j];
                    }
                    a[(j, j)] += 1.0;
                    max_diag = max_diag.max(a[(j, j)]);
                }
                let chol = cholesky_factor(a.as_ref(), max_jitter_for(max_diag))?;
                Ok(Self::Dense {
                    active,
                    sqrt_b,
                    chol,
                })
            }
        }
    }

    /// `(‖L⁻¹ B^½ r‖², log|A|)` for a residual `r = y − m`.
    pub(crate) fn quad_and_log_det(&self, resid: &[f64]) -> Result<(f64, f64)> {
        match self {
            Self::Dense {
                active,
                sqrt_b,
                chol,
            } => {
                let z: Vec<f64> = active.iter().zip(sqrt_b).map(|(&i, s)| s * resid[i]).collect();
                Ok((chol.quad_form(&z)?, log_det(chol)))
            }
            Self::RankOne { sqrt_b, system } => {
                let z: Vec<f64> = sqrt_b.iter().zip(resid).map(|(s, r)| s * r).collect();
                Ok((system.quad_form(&z)?, system.log_det()))
            }
        }
    }

    /// `α = B^½ A⁻¹ B^½ r`, so the posterior mean is `m + K α`. Entries
    /// outside the active set are zero.
    pub(crate) fn alpha(&self, resid: &[f64]) -> Result<Vec<f64>> {
        let n = resid.len();
        let mut alpha = vec![0.0; n];
        match self {
            Self::Dense {
                active,
                sqrt_b,
                chol,
            } => {
                let z: Vec<f64> = active.iter().zip(sqrt_b).map(|(&i, s)| s * resid[i]).collect();
                let w = chol.solve_vec(&z)?;
                for ((&i, s), w) in active.iter().zip(sqrt_b).zip(w) {
                    alpha[i] = s * w;
                }
            }
            Self::RankOne { sqrt_b, system } => {
                let z: Vec<f64> = sqrt_b.iter().zip(resid).map(|(s, r)| s * r).collect();
                let w = system.solve_vec(&z)?;
                for (i, (s, w)) in sqrt_b.iter().zip(w).enumerate() {
                    alpha[i] = s * w;
                }
            }
        }
        Ok(alpha)
    }

    /// Latent posterior at `query`: mean `m + K_{*x} α` and covariance
    /// `K_** − K_{*x} B^½ A⁻¹ B^½ K_{x*}`.
    pub(crate) fn latent(
        &self,
        train_x: &[f64],
        mean: &MeanSpec,
        kernel: &KernelSpec,
        alpha: &[f64],
        query: &[f64],
        full_cov: bool,
    ) -> Result<PredictiveDistribution> {
        let prior_var = kernel.variance();
        match self {
            Self::Dense {
                active,
                sqrt_b,
                chol,
            } => {
                let xa: Vec<f64> = active.iter().map(|&i| train_x[i]).collect();
                let alpha_a: Vec<f64> = active.iter().map(|&i| alpha[i]).collect();
                let mut out_mean = Vec::with_capacity(query.len());
                let mut variance = Vec::with_capacity(query.len());
                let mut covariance = None;
                let blocks: Vec<&[f64]> = if full_cov {
                    vec![query]
                } else {
                    query.chunks(QUERY_BLOCK).collect()
                };
                for block in blocks {
                    let mut v = gram_matrix(&xa, block, kernel);
                    for j in 0..block.len() {
                        let mut m = mean.eval(block[j]);
                        for (i, a) in alpha_a.iter().enumerate() {
                            m += v[(i, j)] * a;
                        }
                        out_mean.push(m);
                        for (i, s) in sqrt_b.iter().enumerate() {
                            v[(i, j)] *= s;
                        }
                    }
                    if !xa.is_empty() {
                        chol.half_solve_in_place(&mut v)?;
                    }
                    for j in 0..block.len() {
                        let q: f64 = v.col(j).iter().map(|z| z * z).sum();
                        variance.push((prior_var - q).max(0.0));
                    }
                    if full_cov {
                        let kss = gram_symmetric(block, kernel);
                        covariance = Some(&kss - v.transpose() * &v);
                    }
                }
                Ok(PredictiveDistribution {
                    mean: out_mean,
                    variance,
                    covariance,
                })
            }
            Self::RankOne { sqrt_b, system } => {
                let c = system.scale();
                let shift = c * alpha.iter().sum::<f64>();
                let reduction = c * c * system.quad_form(sqrt_b)?;
                let var = (prior_var - reduction).max(0.0);
                let m = query.len();
                Ok(PredictiveDistribution {
                    mean: query.iter().map(|&q| mean.eval(q) + shift).collect(),
                    variance: vec![var; m],
                    covariance: full_cov.then(|| Mat::from_fn(m, m, |_, _| var)),
                })
            }
        }
    }
}
