//! Symmetric positive-definite linear algebra and log-domain helpers.
//!
//! Every quadratic form, solve and determinant in the crate goes through
//! [`SpdFactorization`] or [`RankOneSpd`]; nothing inverts a matrix
//! explicitly.

use faer::linalg::triangular_solve::{
    solve_lower_triangular_in_place, solve_upper_triangular_in_place,
};
use faer::{Mat, MatRef, Par, Side};

use crate::error::{Error, Result};

/// Default ceiling for diagonal jitter, relative to nothing: an absolute
/// value in the units of the factorized matrix.
pub const DEFAULT_MAX_JITTER: f64 = 1e-4;

/// Lower Cholesky factor of `A + jitter_used * I`.
#[derive(Debug, Clone)]
pub struct SpdFactorization {
    lower: Mat<f64>,
    jitter_used: f64,
}

impl SpdFactorization {
    pub fn lower_factor(&self) -> MatRef<'_, f64> {
        self.lower.as_ref()
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// Solves `L X = B` in place.
    pub fn half_solve_in_place(&self, b: &mut Mat<f64>) -> Result<()> {
        self.check_rows(b.nrows())?;
        solve_lower_triangular_in_place(self.lower.as_ref(), b.as_mut(), Par::Seq);
        Ok(())
    }

    /// Returns `L⁻¹ v` for a single right-hand side.
    pub fn half_solve_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut m = column(v);
        self.half_solve_in_place(&mut m)?;
        Ok(m.col(0).iter().copied().collect())
    }

    /// Returns `(L Lᵀ)⁻¹ v` for a single right-hand side.
    pub fn solve_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut m = column(v);
        self.half_solve_in_place(&mut m)?;
        solve_upper_triangular_in_place(self.lower.transpose(), m.as_mut(), Par::Seq);
        Ok(m.col(0).iter().copied().collect())
    }

    /// `vᵀ (L Lᵀ)⁻¹ v`.
    pub fn quad_form(&self, v: &[f64]) -> Result<f64> {
        Ok(self.half_solve_vec(v)?.iter().map(|z| z * z).sum())
    }

    fn check_rows(&self, rows: usize) -> Result<()> {
        if rows != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "factor is {n}x{n}, right-hand side has {rows} rows",
                n = self.dim()
            )));
        }
        Ok(())
    }
}

/// Factorizes a symmetric matrix, retrying with geometrically increasing
/// diagonal jitter (starting at `1e-10 * mean(diag)`, ×10 per retry) up to
/// `max_jitter`.
pub fn cholesky_factor(a: MatRef<'_, f64>, max_jitter: f64) -> Result<SpdFactorization> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "expected a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    if n == 0 {
        return Ok(SpdFactorization {
            lower: Mat::zeros(0, 0),
            jitter_used: 0.0,
        });
    }
    debug_assert!(is_symmetric(a, 1e-10), "cholesky_factor: input not symmetric");

    if let Some(lower) = try_llt(a, 0.0) {
        return Ok(SpdFactorization {
            lower,
            jitter_used: 0.0,
        });
    }

    let mean_diag = (0..n).map(|i| a[(i, i)]).sum::<f64>() / n as f64;
    let mut jitter = 1e-10 * if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let mut last = 0.0;
    while jitter <= max_jitter {
        last = jitter;
        if let Some(lower) = try_llt(a, jitter) {
            return Ok(SpdFactorization {
                lower,
                jitter_used: jitter,
            });
        }
        jitter *= 10.0;
    }
    Err(Error::NotPositiveDefinite { jitter: last })
}

fn try_llt(a: MatRef<'_, f64>, jitter: f64) -> Option<Mat<f64>> {
    let n = a.nrows();
    let mut work = a.to_owned();
    for i in 0..n {
        work[(i, i)] += jitter;
    }
    if work.col_iter().any(|c| c.iter().any(|v| !v.is_finite())) {
        return None;
    }
    let llt = work.llt(Side::Lower).ok()?;
    let lower = llt.L().to_owned();
    if (0..n).all(|i| lower[(i, i)] > 0.0 && lower[(i, i)].is_finite()) {
        Some(lower)
    } else {
        None
    }
}

fn is_symmetric(a: MatRef<'_, f64>, rel_tol: f64) -> bool {
    let n = a.nrows();
    let scale = a
        .col_iter()
        .flat_map(|c| c.iter().copied())
        .fold(0.0_f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    (0..n).all(|i| (0..i).all(|j| (a[(i, j)] - a[(j, i)]).abs() <= rel_tol * scale))
}

/// Solves `(L Lᵀ) X = B` by forward and back substitution.
pub fn solve_spd(fact: &SpdFactorization, b: MatRef<'_, f64>) -> Result<Mat<f64>> {
    fact.check_rows(b.nrows())?;
    let mut x = b.to_owned();
    solve_lower_triangular_in_place(fact.lower.as_ref(), x.as_mut(), Par::Seq);
    solve_upper_triangular_in_place(fact.lower.transpose(), x.as_mut(), Par::Seq);
    Ok(x)
}

/// `log |L Lᵀ| = 2 Σ log L_ii`.
pub fn log_det(fact: &SpdFactorization) -> f64 {
    2.0 * (0..fact.dim()).map(|i| fact.lower[(i, i)].ln()).sum::<f64>()
}

pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    let max = v
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if v.is_empty() {
        return Err(Error::EmptyInput);
    }
    if max == f64::NEG_INFINITY || max == f64::INFINITY || max.is_nan() {
        return Ok(max);
    }
    Ok(max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln())
}

/// `I + c·b bᵀ` with `c ≥ 0`, handled in closed form.
///
/// This is the system matrix of a component whose kernel is a constant
/// (`K = c·𝟙𝟙ᵀ`) after symmetric scaling by `B^{1/2}`.
#[derive(Debug, Clone)]
pub struct RankOneSpd {
    scale: f64,
    b: Vec<f64>,
    b_sq: f64,
}

impl RankOneSpd {
    pub fn new(scale: f64, b: Vec<f64>) -> Result<Self> {
        if !(scale >= 0.0) || !scale.is_finite() {
            return Err(Error::InvalidHyperparameter(format!(
                "rank-one scale must be finite and non-negative, got {scale}"
            )));
        }
        let b_sq = b.iter().map(|v| v * v).sum();
        Ok(Self { scale, b, b_sq })
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn vector(&self) -> &[f64] {
        &self.b
    }

    /// `1 + c·‖b‖²`, the only non-unit eigenvalue.
    pub fn denominator(&self) -> f64 {
        1.0 + self.scale * self.b_sq
    }

    pub fn log_det(&self) -> f64 {
        (self.scale * self.b_sq).ln_1p()
    }

    /// Sherman–Morrison: `v − c·b (bᵀv) / (1 + c‖b‖²)`.
    pub fn solve_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "rank-one system is {n}x{n}, vector has length {}",
                v.len(),
                n = self.dim()
            )));
        }
        let bv: f64 = self.b.iter().zip(v).map(|(b, v)| b * v).sum();
        let coef = self.scale * bv / self.denominator();
        Ok(v.iter().zip(&self.b).map(|(v, b)| v - coef * b).collect())
    }

    pub fn quad_form(&self, v: &[f64]) -> Result<f64> {
        let x = self.solve_vec(v)?;
        Ok(x.iter().zip(v).map(|(a, b)| a * b).sum())
    }
}

/// Wraps a slice as an `n × 1` owned matrix.
pub fn column(v: &[f64]) -> Mat<f64> {
    Mat::from_fn(v.len(), 1, |i, _| v[i])
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
