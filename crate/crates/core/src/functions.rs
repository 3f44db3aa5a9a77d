//! Prior mean functions, covariance functions and their hyperparameter
//! layouts.
//!
//! `MeanSpec` and `KernelSpec` expose their hyperparameters as a flat vector in
//! optimizer space: positivity-constrained quantities (β, σ_f, l, c) are
//! stored as logarithms, location/scale parameters (α₁, α₂, α₃, constant
//! mean level) are left as is.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Box constraint and parameterization for one optimizer coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamInfo {
    pub lower: f64,
    pub upper: f64,
    /// The coordinate is the logarithm of a positive quantity.
    pub log_scale: bool,
}

impl ParamInfo {
    pub const fn free() -> Self {
        Self {
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
            log_scale: false,
        }
    }

    pub fn log_bounded(lo: f64, hi: f64) -> Self {
        Self {
            lower: lo.ln(),
            upper: hi.ln(),
            log_scale: true,
        }
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lower, self.upper)
    }
}

pub const BETA_RANGE: (f64, f64) = (1e-2, 1e4);
pub const PROCESS_STD_RANGE: (f64, f64) = (1e-4, 1e2);
pub const LENGTH_SCALE_RANGE: (f64, f64) = (1e-3, 1e2);
pub const CONSTANT_LEVEL_RANGE: (f64, f64) = (1e-8, 1e2);
pub const NOISE_STD_RANGE: (f64, f64) = (1e-4, 1e1);

/// `log(1 + e^z)` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Scaled soft-clip: a sigmoid-like curve with asymptotes `0` and `alpha1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftClipMean {
    /// Height of the upper asymptote (rated or curtailed power).
    pub alpha1: f64,
    /// Input scale.
    pub alpha2: f64,
    /// Input offset.
    pub alpha3: f64,
    /// Corner sharpness, strictly positive.
    pub beta: f64,
}

impl SoftClipMean {
    pub fn new(alpha1: f64, alpha2: f64, alpha3: f64, beta: f64) -> Result<Self> {
        let m = Self {
            alpha1,
            alpha2,
            alpha3,
            beta,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidHyperparameter(format!(
                "soft-clip beta must be positive, got {}",
                self.beta
            )));
        }
        if ![self.alpha1, self.alpha2, self.alpha3].iter().all(|a| a.is_finite()) {
            return Err(Error::InvalidHyperparameter(
                "soft-clip alphas must be finite".into(),
            ));
        }
        Ok(())
    }

    /// Internal coordinate `v = α₂x + α₃`.
    pub fn coordinate(&self, x: f64) -> f64 {
        self.alpha2 * x + self.alpha3
    }

    pub fn eval(&self, x: f64) -> f64 {
        let v = self.coordinate(x);
        let b = self.beta;
        self.alpha1 / b * (softplus(b * v) - softplus(b * (v - 1.0)))
    }
}

/// Checked evaluation of the soft-clip mean at one input.
pub fn soft_clip(x: f64, params: &SoftClipMean) -> Result<f64> {
    params.validate()?;
    Ok(params.eval(x))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SquaredExponentialKernel {
    /// σ_f, in output units.
    pub process_std: f64,
    /// l, in input units.
    pub length_scale: f64,
}

impl SquaredExponentialKernel {
    pub fn new(process_std: f64, length_scale: f64) -> Result<Self> {
        let k = Self {
            process_std,
            length_scale,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.process_std > 0.0 && self.length_scale > 0.0)
            || !self.process_std.is_finite()
            || !self.length_scale.is_finite()
        {
            return Err(Error::InvalidHyperparameter(format!(
                "squared-exponential kernel needs positive process_std and length_scale, got ({}, {})",
                self.process_std, self.length_scale
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn eval(&self, xi: f64, xj: f64) -> f64 {
        let d = (xi - xj) / self.length_scale;
        self.process_std * self.process_std * (-0.5 * d * d).exp()
    }
}

pub fn se_kernel(xi: f64, xj: f64, params: &SquaredExponentialKernel) -> Result<f64> {
    params.validate()?;
    Ok(params.eval(xi, xj))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantKernel {
    pub level: f64,
}

impl ConstantKernel {
    pub fn new(level: f64) -> Result<Self> {
        if !(level >= 0.0) || !level.is_finite() {
            return Err(Error::InvalidHyperparameter(format!(
                "constant kernel level must be non-negative, got {level}"
            )));
        }
        Ok(Self { level })
    }
}

pub fn constant_kernel(_xi: f64, _xj: f64, params: &ConstantKernel) -> f64 {
    params.level
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeanSpec {
    Zero,
    Constant { level: f64 },
    SoftClip(SoftClipMean),
}

impl MeanSpec {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            MeanSpec::Zero => 0.0,
            MeanSpec::Constant { level } => *level,
            MeanSpec::SoftClip(sc) => sc.eval(x),
        }
    }

    pub fn eval_many(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| self.eval(x)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            MeanSpec::Zero => Ok(()),
            MeanSpec::Constant { level } if level.is_finite() => Ok(()),
            MeanSpec::Constant { level } => Err(Error::InvalidHyperparameter(format!(
                "constant mean level must be finite, got {level}"
            ))),
            MeanSpec::SoftClip(sc) => sc.validate(),
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            MeanSpec::Zero => 0,
            MeanSpec::Constant { .. } => 1,
            MeanSpec::SoftClip(_) => 4,
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            MeanSpec::Zero => vec![],
            MeanSpec::Constant { level } => vec![*level],
            MeanSpec::SoftClip(sc) => vec![sc.alpha1, sc.alpha2, sc.alpha3, sc.beta.ln()],
        }
    }

    pub fn with_params(&self, p: &[f64]) -> Self {
        debug_assert_eq!(p.len(), self.n_params());
        match self {
            MeanSpec::Zero => MeanSpec::Zero,
            MeanSpec::Constant { .. } => MeanSpec::Constant { level: p[0] },
            MeanSpec::SoftClip(_) => MeanSpec::SoftClip(SoftClipMean {
                alpha1: p[0],
                alpha2: p[1],
                alpha3: p[2],
                beta: p[3].exp(),
            }),
        }
    }

    pub fn param_info(&self) -> Vec<ParamInfo> {
        match self {
            MeanSpec::Zero => vec![],
            MeanSpec::Constant { .. } => vec![ParamInfo::free()],
            MeanSpec::SoftClip(_) => vec![
                ParamInfo::free(),
                ParamInfo::free(),
                ParamInfo::free(),
                ParamInfo::log_bounded(BETA_RANGE.0, BETA_RANGE.1),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    SquaredExponential(SquaredExponentialKernel),
    Constant(ConstantKernel),
}

impl KernelSpec {
    #[inline]
    pub fn eval(&self, xi: f64, xj: f64) -> f64 {
        match self {
            KernelSpec::SquaredExponential(k) => k.eval(xi, xj),
            KernelSpec::Constant(k) => k.level,
        }
    }

    /// Prior variance `k(x, x)`; input independent for both kernels.
    pub fn variance(&self) -> f64 {
        match self {
            KernelSpec::SquaredExponential(k) => k.process_std * k.process_std,
            KernelSpec::Constant(k) => k.level,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            KernelSpec::SquaredExponential(k) => k.validate(),
            KernelSpec::Constant(k) => ConstantKernel::new(k.level).map(|_| ()),
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            KernelSpec::SquaredExponential(_) => 2,
            KernelSpec::Constant(_) => 1,
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            KernelSpec::SquaredExponential(k) => vec![k.process_std.ln(), k.length_scale.ln()],
            KernelSpec::Constant(k) => vec![k.level.max(CONSTANT_LEVEL_RANGE.0).ln()],
        }
    }

    pub fn with_params(&self, p: &[f64]) -> Self {
        debug_assert_eq!(p.len(), self.n_params());
        match self {
            KernelSpec::SquaredExponential(_) => {
                KernelSpec::SquaredExponential(SquaredExponentialKernel {
                    process_std: p[0].exp(),
                    length_scale: p[1].exp(),
                })
            }
            KernelSpec::Constant(_) => KernelSpec::Constant(ConstantKernel { level: p[0].exp() }),
        }
    }

    pub fn param_info(&self) -> Vec<ParamInfo> {
        match self {
            KernelSpec::SquaredExponential(_) => vec![
                ParamInfo::log_bounded(PROCESS_STD_RANGE.0, PROCESS_STD_RANGE.1),
                ParamInfo::log_bounded(LENGTH_SCALE_RANGE.0, LENGTH_SCALE_RANGE.1),
            ],
            KernelSpec::Constant(_) => vec![ParamInfo::log_bounded(
                CONSTANT_LEVEL_RANGE.0,
                CONSTANT_LEVEL_RANGE.1,
            )],
        }
    }
}

/// Pairwise kernel evaluations `K[i, j] = k(x1[i], x2[j])`.
pub fn gram_matrix(x1: &[f64], x2: &[f64], kernel: &KernelSpec) -> Mat<f64> {
    Mat::from_fn(x1.len(), x2.len(), |i, j| kernel.eval(x1[i], x2[j]))
}

/// Symmetric gram matrix of one input set; only the lower triangle is
/// evaluated and mirrored, so the result is exactly symmetric.
pub fn gram_symmetric(x: &[f64], kernel: &KernelSpec) -> Mat<f64> {
    let n = x.len();
    let mut k = Mat::<f64>::zeros(n, n);
    for j in 0..n {
        for i in j..n {
            let v = kernel.eval(x[i], x[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use faer::Side;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn soft_clip_symmetry_point_is_half_height() {
        for &(a1, a2, a3, b) in &[(1.0, 1.0, 0.0, 10.0), (0.46, 2.0, -1.0, 28.8), (3.0, 0.5, 0.2, 0.7)] {
            let sc = SoftClipMean::new(a1, a2, a3, b).unwrap();
            let x = (0.5 - a3) / a2;
            assert_relative_eq!(sc.eval(x), a1 / 2.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn soft_clip_upper_asymptote() {
        let sc = SoftClipMean::new(1.0, 1.0, 0.0, 30.0).unwrap();
        assert!((sc.eval(10.0) - 1.0).abs() < 1e-10);
        assert!(sc.eval(-10.0).abs() < 1e-10);
    }

    #[test]
    fn soft_clip_matches_extended_precision_value() {
        // (1/10)·ln[(1 + e^{7.5}) / (1 + e^{-2.5})], evaluated with 50-digit
        // arithmetic: 0.742166319718281117...
        let sc = SoftClipMean::new(1.0, 1.0, 0.0, 10.0).unwrap();
        assert!((sc.eval(0.75) - 0.742_166_319_718_281_1).abs() < 1e-14);
    }

    #[test]
    fn soft_clip_is_finite_for_sharp_corners() {
        let sc = SoftClipMean::new(1.0, 1.0, 0.0, 1e4).unwrap();
        for x in [-1e3, -1.0, 0.0, 0.3, 1.0, 1e3] {
            assert!(sc.eval(x).is_finite());
        }
        assert!((sc.eval(0.3) - 0.3).abs() < 1e-6);
    }

    #[test]
    fn soft_clip_rejects_non_positive_beta() {
        let sc = SoftClipMean {
            alpha1: 1.0,
            alpha2: 1.0,
            alpha3: 0.0,
            beta: 0.0,
        };
        assert!(matches!(
            soft_clip(0.0, &sc),
            Err(Error::InvalidHyperparameter(_))
        ));
    }

    #[test]
    fn se_kernel_values() {
        let k = SquaredExponentialKernel::new(1.3, 0.7).unwrap();
        assert_relative_eq!(se_kernel(0.2, 0.2, &k).unwrap(), 1.69, epsilon = 1e-14);
        let k = SquaredExponentialKernel::new(1.0, 0.4).unwrap();
        assert_relative_eq!(se_kernel(0.1, 0.5, &k).unwrap(), (-0.5f64).exp(), epsilon = 1e-14);
        let k = SquaredExponentialKernel::new(2.0, 0.5).unwrap();
        assert_relative_eq!(
            se_kernel(0.0, 1.0, &k).unwrap(),
            4.0 * (-2.0f64).exp(),
            epsilon = 1e-14
        );
        assert!(SquaredExponentialKernel::new(0.0, 1.0).is_err());
        assert!(SquaredExponentialKernel::new(1.0, -1.0).is_err());
    }

    #[test]
    fn constant_kernel_values_and_rank() {
        assert_eq!(constant_kernel(0.1, 5.0, &ConstantKernel::new(0.0).unwrap()), 0.0);
        let c = ConstantKernel::new(3.0).unwrap();
        assert_eq!(constant_kernel(-2.0, 7.0, &c), 3.0);
        assert!(ConstantKernel::new(-1.0).is_err());

        let g = gram_matrix(&[0.0, 1.0, 2.0, 5.0], &[0.0, 1.0, 2.0, 5.0], &KernelSpec::Constant(c));
        let eig = g.self_adjoint_eigenvalues(Side::Lower).unwrap();
        let mut eig: Vec<f64> = eig.into_iter().collect();
        eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(eig[..3].iter().all(|e| e.abs() < 1e-12));
        assert_relative_eq!(eig[3], 12.0, epsilon = 1e-12);
    }

    #[test]
    fn gram_matrix_is_symmetric_psd() {
        let k = KernelSpec::SquaredExponential(SquaredExponentialKernel::new(1.5, 0.3).unwrap());
        let g = gram_matrix(&[0.4], &[0.4], &k);
        assert_relative_eq!(g[(0, 0)], 2.25);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..20).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g = gram_matrix(&x, &x, &k);
        assert_eq!(g, g.transpose().to_owned());
        assert_eq!(g, gram_symmetric(&x, &k));
        let eig = g.self_adjoint_eigenvalues(Side::Lower).unwrap();
        assert!(eig.iter().all(|&e| e >= -1e-10));
    }

    #[test]
    fn param_round_trip() {
        let m = MeanSpec::SoftClip(SoftClipMean::new(0.9, 1.1, -0.3, 12.0).unwrap());
        let back = m.with_params(&m.params());
        match back {
            MeanSpec::SoftClip(sc) => {
                assert_relative_eq!(sc.beta, 12.0, epsilon = 1e-12);
                assert_eq!(sc.alpha1, 0.9);
            }
            _ => unreachable!(),
        }
        let k = KernelSpec::SquaredExponential(SquaredExponentialKernel::new(0.5, 2.0).unwrap());
        assert_eq!(k.params().len(), k.param_info().len());
        let back = k.with_params(&k.params());
        assert_relative_eq!(back.variance(), 0.25, epsilon = 1e-14);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn soft_clip_monotone_and_bounded(
                a1 in 0.05f64..3.0, a2 in 0.05f64..5.0, a3 in -2.0f64..2.0, b in 0.1f64..200.0,
            ) {
                let sc = SoftClipMean::new(a1, a2, a3, b).unwrap();
                let mut prev = f64::NEG_INFINITY;
                for i in 0..=400 {
                    let x = -10.0 + 20.0 * i as f64 / 400.0;
                    let y = sc.eval(x);
                    prop_assert!(y >= prev - 1e-12);
                    prop_assert!(y >= -1e-12 && y <= a1 + 1e-12);
                    prev = y;
                }
            }

            #[test]
            fn soft_clip_bounded_for_negative_height(
                a1 in -3.0f64..-0.01, a2 in -5.0f64..5.0, a3 in -2.0f64..2.0, b in 0.1f64..200.0,
                x in -20.0f64..20.0,
            ) {
                let sc = SoftClipMean::new(a1, a2, a3, b).unwrap();
                let y = sc.eval(x);
                prop_assert!(y >= a1 - 1e-12 && y <= 1e-12);
            }

            #[test]
            fn se_kernel_peaks_at_zero_distance(
                sf in 0.01f64..10.0, l in 0.01f64..10.0, xi in -5.0f64..5.0, d in 1e-3f64..5.0,
            ) {
                let k = SquaredExponentialKernel::new(sf, l).unwrap();
                prop_assert!(k.eval(xi, xi + d) < sf * sf);
                prop_assert_eq!(k.eval(xi, xi), sf * sf);
                prop_assert_eq!(k.eval(xi, xi + d), k.eval(xi + d, xi));
            }

            #[test]
            fn gram_plus_small_jitter_factorizes(
                sf in PROCESS_STD_RANGE.0..PROCESS_STD_RANGE.1,
                l in LENGTH_SCALE_RANGE.0..LENGTH_SCALE_RANGE.1,
                seed in 0u64..1000,
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x: Vec<f64> = (0..15).map(|_| rng.random_range(-2.0..2.0)).collect();
                let kern = KernelSpec::SquaredExponential(SquaredExponentialKernel::new(sf, l).unwrap());
                let mut g = gram_symmetric(&x, &kern);
                for i in 0..x.len() {
                    g[(i, i)] += 1e-8;
                }
                prop_assert!(crate::numerics::cholesky_factor(g.as_ref(), 1e-8 * sf * sf + 1e-6).is_ok());
            }
        }
    }
}
