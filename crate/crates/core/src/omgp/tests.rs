use super::*;
use crate::functions::{ConstantKernel, KernelSpec, MeanSpec, SoftClipMean, SquaredExponentialKernel};
use crate::gp::{gp_predict, GpModel, GpPrior};
use crate::testutil::{add, diag, inverse, kernel_matrix, matmul, matvec, transpose, Dense};
use rand_distr::{Distribution, StandardNormal};

fn se(sf: f64, l: f64) -> KernelSpec {
    KernelSpec::SquaredExponential(SquaredExponentialKernel::new(sf, l).unwrap())
}

fn sc(a1: f64, a2: f64, a3: f64, b: f64) -> MeanSpec {
    MeanSpec::SoftClip(SoftClipMean::new(a1, a2, a3, b).unwrap())
}

fn two_component_prior(noise: f64) -> OmgpPrior {
    OmgpPrior::new(
        vec![
            ComponentPrior {
                mean: sc(1.0, 0.8, 0.5, 5.0),
                kernel: se(0.3, 0.7),
            },
            ComponentPrior {
                mean: MeanSpec::Constant { level: -0.2 },
                kernel: se(0.5, 0.4),
            },
        ],
        noise,
    )
    .unwrap()
}

fn random_rows(n: usize, k: usize, seed: u64, lo: f64) -> Responsibilities {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = Vec::new();
    for _ in 0..n {
        let row: Vec<f64> = (0..k).map(|_| rng.random_range(lo..1.0)).collect();
        let s: f64 = row.iter().sum();
        v.extend(row.iter().map(|r| r / s));
    }
    Responsibilities::new(n, k, v).unwrap()
}

fn small_instance(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    let y = (0..n).map(|_| rng.random_range(-0.5..1.2)).collect();
    (x, y)
}

/// Two separated lines with noise; labels returned.
fn two_lines(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut l = Vec::new();
    for i in 0..n {
        let xi: f64 = rng.random_range(-1.0..1.0);
        let e: f64 = StandardNormal.sample(&mut rng);
        let lab = i % 2;
        x.push(xi);
        y.push(if lab == 0 { 1.0 + 0.3 * xi } else { -1.0 - 0.3 * xi } + 0.05 * e);
        l.push(lab);
    }
    (x, y, l)
}

fn two_line_prior() -> OmgpPrior {
    OmgpPrior::new(
        vec![
            ComponentPrior {
                mean: MeanSpec::Constant { level: 0.8 },
                kernel: se(0.3, 1.0),
            },
            ComponentPrior {
                mean: MeanSpec::Constant { level: -0.8 },
                kernel: se(0.3, 1.0),
            },
        ],
        0.1,
    )
    .unwrap()
}

/// Dense `(K⁻¹ + B)⁻¹` and `m + Σ B r` for one component.
fn dense_posterior(x: &[f64], y: &[f64], c: &ComponentPrior, b: &[f64]) -> (Vec<f64>, Dense) {
    let k = kernel_matrix(x, x, |a, b| c.kernel.eval(a, b));
    let (kinv, _) = inverse(&k);
    let (sigma, _) = inverse(&add(&kinv, &diag(b)));
    let r: Vec<f64> = x.iter().zip(y).map(|(&xi, &yi)| b_val(yi - c.mean.eval(xi))).collect();
    let br: Vec<f64> = r.iter().zip(b).map(|(r, b)| r * b).collect();
    let mu = matvec(&sigma, &br)
        .into_iter()
        .zip(x)
        .map(|(v, &xi)| v + c.mean.eval(xi))
        .collect();
    (mu, sigma)
}

fn b_val(v: f64) -> f64 {
    v
}

/// Uncorrected bound `L_b` at the optimal `q(f)`; equals the corrected
/// bound.
fn dense_uncorrected_bound(model: &OmgpModel) -> f64 {
    let x = model.train_x();
    let y = model.train_y();
    let n = x.len();
    let mut total = 0.0;
    for (k, c) in model.prior.component_priors.iter().enumerate() {
        let s2 = model.prior.shared_noise_std.powi(2);
        let pi = model.responsibilities.column(k);
        let b: Vec<f64> = pi.iter().map(|p| p / s2).collect();
        let (mu, sigma) = dense_posterior(x, y, c, &b);
        for i in 0..n {
            total += pi[i]
                * (-0.5 * (2.0 * std::f64::consts::PI * s2).ln()
                    - ((y[i] - mu[i]).powi(2) + sigma[i][i]) / (2.0 * s2));
        }
        let kmat = kernel_matrix(x, x, |a, b| c.kernel.eval(a, b));
        let (kinv, kdet) = inverse(&kmat);
        let (_, sdet) = inverse(&sigma);
        let tr: f64 = (0..n).map(|i| matmul(&kinv, &sigma)[i][i]).sum();
        let d: Vec<f64> = (0..n).map(|i| mu[i] - c.mean.eval(x[i])).collect();
        let quad: f64 = d.iter().zip(matvec(&kinv, &d)).map(|(a, b)| a * b).sum();
        total -= 0.5 * (tr + quad - n as f64 + (kdet / sdet).ln());
    }
    let kc = model.k_components() as f64;
    for row in model.responsibilities.rows() {
        for &p in row {
            if p > 0.0 {
                total -= p * (p * kc).ln();
            }
        }
    }
    total
}

#[test]
fn single_component_responsibilities_are_one() {
    let (x, y) = small_instance(6, 1);
    let prior = OmgpPrior::new(vec![two_component_prior(0.2).component_priors[0]], 0.2).unwrap();
    let model = OmgpModel::new(&x, &y, prior, Responsibilities::uniform(6, 1), None).unwrap();
    let r = update_responsibilities(&model);
    assert!(r.as_slice().iter().all(|&v| v == 1.0));
}

#[test]
fn identical_components_split_evenly() {
    let (x, y) = small_instance(5, 2);
    let c = two_component_prior(0.2).component_priors[0];
    let prior = OmgpPrior::new(vec![c, c], 0.2).unwrap();
    let model = OmgpModel::new(&x, &y, prior, Responsibilities::uniform(5, 2), None).unwrap();
    let r = update_responsibilities(&model);
    for row in r.rows() {
        assert!((row[0] - 0.5).abs() < 1e-15 && (row[1] - 0.5).abs() < 1e-15);
    }
}

#[test]
fn responsibilities_match_scalar_oracle() {
    let (x, y) = small_instance(3, 3);
    let prior = two_component_prior(0.3);
    let model = OmgpModel::new(&x, &y, prior, random_rows(3, 2, 4, 0.1), None).unwrap();
    let r = update_responsibilities(&model);
    for i in 0..3 {
        let w: Vec<f64> = (0..2)
            .map(|k| {
                let c = &model.components[k];
                let s2: f64 = 0.09;
                0.5 * (-((y[i] - c.post_mean[i]).powi(2) + c.post_var[i]) / (2.0 * s2)).exp()
                    / (2.0 * std::f64::consts::PI * s2).sqrt()
            })
            .collect();
        let z = w[0] + w[1];
        for k in 0..2 {
            assert!((r.get(i, k) - w[k] / z).abs() < 1e-12);
        }
    }
}

#[test]
fn full_responsibility_reduces_to_gp_posterior() {
    let (x, y) = small_instance(6, 5);
    let c = two_component_prior(0.2).component_priors[0];
    let prior = OmgpPrior::new(vec![c], 0.2).unwrap();
    let model = OmgpModel::new(&x, &y, prior, Responsibilities::uniform(6, 1), None).unwrap();
    let gp = GpModel::condition(GpPrior::new(c.mean, c.kernel, 0.2).unwrap(), &x, &y).unwrap();
    let p = gp_predict(&gp, &x, false).unwrap();
    for i in 0..6 {
        assert!((model.components[0].post_mean[i] - p.mean[i]).abs() < 1e-8);
        assert!((model.components[0].post_var[i] - p.variance[i]).abs() < 1e-8);
    }
}

#[test]
fn zero_weight_point_drops_out() {
    let (x, y) = small_instance(6, 6);
    let c = two_component_prior(0.2).component_priors[0];
    let prior = OmgpPrior::new(vec![c, c], 0.2).unwrap();
    let mut pi = Vec::new();
    for i in 0..6 {
        pi.extend(if i == 2 { [0.0, 1.0] } else { [1.0, 0.0] });
    }
    let model = OmgpModel::new(&x, &y, prior, Responsibilities::new(6, 2, pi).unwrap(), None).unwrap();
    let keep: Vec<usize> = (0..6).filter(|&i| i != 2).collect();
    let xs: Vec<f64> = keep.iter().map(|&i| x[i]).collect();
    let ys: Vec<f64> = keep.iter().map(|&i| y[i]).collect();
    let gp = GpModel::condition(GpPrior::new(c.mean, c.kernel, 0.2).unwrap(), &xs, &ys).unwrap();
    let p = gp_predict(&gp, &x, false).unwrap();
    for i in 0..6 {
        assert!((model.components[0].post_mean[i] - p.mean[i]).abs() < 1e-8);
        assert!((model.components[0].post_var[i] - p.variance[i]).abs() < 1e-8);
    }
    assert_eq!(model.components[0].b_diag[2], 0.0);
}

#[test]
fn component_posterior_matches_dense_formula() {
    for seed in 0..3 {
        let (x, y) = small_instance(5, 10 + seed);
        let prior = two_component_prior(0.25);
        let resp = random_rows(5, 2, 20 + seed, 0.05);
        let model = OmgpModel::new(&x, &y, prior.clone(), resp.clone(), None).unwrap();
        for (k, c) in prior.component_priors.iter().enumerate() {
            let b: Vec<f64> = resp.column(k).iter().map(|p| p / 0.0625).collect();
            let (mu, sigma) = dense_posterior(&x, &y, c, &b);
            let cov = model.component_covariance(k).unwrap();
            for i in 0..5 {
                assert!((model.components[k].post_mean[i] - mu[i]).abs() < 1e-8);
                assert!((model.components[k].post_var[i] - sigma[i][i]).abs() < 1e-8);
                for j in 0..5 {
                    assert!((cov[(i, j)] - sigma[i][j]).abs() < 1e-8);
                }
            }
        }
    }
}

#[test]
fn constant_kernel_component_matches_dense_formula() {
    let (x, y) = small_instance(5, 30);
    let c = ComponentPrior {
        mean: MeanSpec::Zero,
        kernel: KernelSpec::Constant(ConstantKernel::new(0.4).unwrap()),
    };
    let prior = OmgpPrior::new(vec![c, two_component_prior(0.2).component_priors[0]], 0.2).unwrap();
    let resp = random_rows(5, 2, 31, 0.05);
    let model = OmgpModel::new(&x, &y, prior, resp.clone(), None).unwrap();
    // Constant K is singular; use the Woodbury form with explicit B⁻¹.
    let kmat = kernel_matrix(&x, &x, |_, _| 0.4);
    let binv: Vec<f64> = resp.column(0).iter().map(|p| 0.04 / p).collect();
    let (ainv, _) = inverse(&add(&kmat, &diag(&binv)));
    let sigma = add(&kmat, &matmul(&matmul(&kmat, &ainv), &kmat).iter().map(|r| r.iter().map(|v| -v).collect()).collect());
    let mu = matvec(&matmul(&kmat, &ainv), &y);
    for i in 0..5 {
        assert!((model.components[0].post_mean[i] - mu[i]).abs() < 1e-8);
        assert!((model.components[0].post_var[i] - sigma[i][i]).abs() < 1e-8);
    }
    let pred = omgp_predict_latent(&model, &[0.3, 7.0], false, false).unwrap();
    assert!((pred[0].mean[0] - mu[0]).abs() < 1e-8);
    assert!((pred[0].variance[1] - sigma[0][0]).abs() < 1e-8);
}

#[test]
fn bound_matches_uncorrected_bound_at_optimal_q() {
    for seed in 0..3 {
        let (x, y) = small_instance(5, 40 + seed);
        let model = OmgpModel::new(&x, &y, two_component_prior(0.3), random_rows(5, 2, 50 + seed, 0.05), None).unwrap();
        let oracle = dense_uncorrected_bound(&model);
        assert!((corrected_lower_bound(&model) - oracle).abs() < 1e-6, "{} vs {oracle}", corrected_lower_bound(&model));
    }
}

#[test]
fn bound_on_empty_data_is_zero() {
    let model = OmgpModel::new(&[], &[], two_component_prior(0.3), Responsibilities::uniform(0, 2), None).unwrap();
    assert_eq!(corrected_lower_bound(&model), 0.0);
}

#[test]
fn single_component_bound_is_negative_nlml() {
    let (x, y) = small_instance(6, 7);
    let c = two_component_prior(0.2).component_priors[1];
    let prior = OmgpPrior::new(vec![c], 0.2).unwrap();
    let model = OmgpModel::new(&x, &y, prior, Responsibilities::uniform(6, 1), None).unwrap();
    let nlml = crate::gp::nlml(&GpPrior::new(c.mean, c.kernel, 0.2).unwrap(), &x, &y).unwrap();
    assert!((corrected_lower_bound(&model) + nlml).abs() < 1e-6);
    let e = e_step(model, &OmgpConfig::default()).unwrap();
    let steps = e.bound_trace.iter().filter(|t| t.phase == Phase::E).count();
    assert_eq!(steps, 1);
    assert!((e.final_bound() + nlml).abs() < 1e-6);
}

#[test]
fn e_step_fixed_point_is_a_bound_maximum() {
    let (x, y, _) = two_lines(40, 8);
    let model = OmgpModel::new(&x, &y, two_line_prior(), perturbed_uniform(40, 2, 0.05, 1), None).unwrap();
    let model = e_step(model, &OmgpConfig::default()).unwrap();
    let converged_bound = corrected_lower_bound(&model);
    let again = e_step(model.clone(), &OmgpConfig::default()).unwrap();
    let n_e = again.bound_trace.len() - model.bound_trace.len();
    assert_eq!(n_e, 1);
    assert!((again.final_bound() - converged_bound).abs() <= 1e-6 * converged_bound.abs());

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let mut pi = model.responsibilities.as_slice().to_vec();
        for row in pi.chunks_mut(2) {
            let d = rng.random_range(-0.05..0.05);
            row[0] = (row[0] + d).clamp(0.0, 1.0);
            row[1] = 1.0 - row[0];
        }
        let perturbed = OmgpModel::new(&x, &y, model.prior.clone(), Responsibilities::new(40, 2, pi).unwrap(), None).unwrap();
        assert!(corrected_lower_bound(&perturbed) < converged_bound);
    }
}

#[test]
fn e_step_increases_bound_from_random_start() {
    let (x, y, _) = two_lines(60, 9);
    let model = OmgpModel::new(&x, &y, two_line_prior(), perturbed_uniform(60, 2, 0.05, 2), None).unwrap();
    let start = corrected_lower_bound(&model);
    let model = e_step(model, &OmgpConfig::default()).unwrap();
    let bounds: Vec<f64> = std::iter::once(start).chain(model.bound_trace.iter().map(|t| t.bound)).collect();
    assert!(bounds.len() >= 3);
    assert!(bounds[1] > bounds[0] && bounds[2] > bounds[1]);
    for w in bounds.windows(2) {
        assert!(w[1] >= w[0] - 1e-9);
    }
    for row in model.responsibilities.rows() {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn m_step_recovers_from_perturbed_length_scale() {
    let (x, y, _) = two_lines(50, 11);
    let cfg = OmgpConfig::default();
    let model = fit_omgp(&x, &y, &two_line_prior(), &cfg).unwrap();
    let reference = corrected_lower_bound(&model);
    let mut prior = model.prior.clone();
    if let KernelSpec::SquaredExponential(k) = &mut prior.component_priors[0].kernel {
        k.length_scale *= 4.0;
    }
    let perturbed = model.with_state(prior, model.responsibilities.clone()).unwrap();
    assert!(corrected_lower_bound(&perturbed) < reference);
    let refit = m_step(perturbed, &cfg.optimizer).unwrap();
    assert!((corrected_lower_bound(&refit) - reference).abs() < 1e-3);

    let stay = m_step(model, &cfg.optimizer).unwrap();
    assert!((corrected_lower_bound(&stay) - reference).abs() <= 1e-5 * reference.abs());
}

#[test]
fn m_step_moves_amplitude_toward_truth() {
    let truth = SoftClipMean::new(1.0, 1.0, 0.5, 8.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut labels = Vec::new();
    for i in 0..80 {
        let xi: f64 = rng.random_range(-1.0..1.5);
        let e: f64 = StandardNormal.sample(&mut rng);
        x.push(xi);
        if i % 4 == 0 {
            y.push(0.01 * e);
            labels.push(1);
        } else {
            y.push(truth.eval(xi) + 0.02 * e);
            labels.push(0);
        }
    }
    let prior = OmgpPrior::new(
        vec![
            ComponentPrior {
                mean: sc(0.8, 1.0, 0.5, 8.0),
                kernel: se(0.02, 0.5),
            },
            ComponentPrior {
                mean: MeanSpec::Zero,
                kernel: KernelSpec::Constant(ConstantKernel::new(1e-3).unwrap()),
            },
        ],
        0.02,
    )
    .unwrap();
    let pi: Vec<f64> = labels.iter().flat_map(|&l| if l == 0 { [0.99, 0.01] } else { [0.01, 0.99] }).collect();
    let model = OmgpModel::new(&x, &y, prior, Responsibilities::new(80, 2, pi).unwrap(), None).unwrap();
    let fitted = m_step(model, &OptimizerConfig::single_start(100)).unwrap();
    let MeanSpec::SoftClip(s) = fitted.prior.component_priors[0].mean else { unreachable!() };
    assert!((s.alpha1 - 1.0).abs() < 0.2, "alpha1 = {}", s.alpha1);
}

#[test]
fn single_component_fit_matches_gp_fit() {
    let truth = SoftClipMean::new(1.0, 0.9, 0.6, 6.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x: Vec<f64> = (0..40).map(|_| rng.random_range(-1.5..1.5)).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|&v| {
            let e: f64 = StandardNormal.sample(&mut rng);
            truth.eval(v) + 0.05 * e
        })
        .collect();
    let prior = OmgpPrior::template(&x, &y, 1).unwrap();
    let opt = OptimizerConfig::single_start(200);
    let cfg = OmgpConfig {
        optimizer: opt.clone(),
        ..OmgpConfig::default()
    };
    let om = fit_omgp(&x, &y, &prior, &cfg).unwrap();
    let c = prior.component_priors[0];
    let gp = crate::gp::fit_gp(&x, &y, &GpPrior::new(c.mean, c.kernel, prior.shared_noise_std).unwrap(), &opt).unwrap();
    let q: Vec<f64> = (0..20).map(|i| -1.5 + 0.15 * i as f64).collect();
    let a = omgp_predict(&om, &q).unwrap();
    let b = gp_predict(&gp, &q, true).unwrap();
    for i in 0..q.len() {
        assert!((a.components[0].mean[i] - b.mean[i]).abs() < 1e-3);
    }
}

#[test]
fn single_component_prediction_equals_gp_prediction() {
    let (x, y) = small_instance(6, 14);
    let c = two_component_prior(0.2).component_priors[0];
    let prior = OmgpPrior::new(vec![c], 0.2).unwrap();
    let model = OmgpModel::new(&x, &y, prior, Responsibilities::uniform(6, 1), None).unwrap();
    let gp = GpModel::condition(GpPrior::new(c.mean, c.kernel, 0.2).unwrap(), &x, &y).unwrap();
    let q = [-2.0, -0.1, 0.5, 3.0];
    let a = omgp_predict(&model, &q).unwrap();
    let b = gp_predict(&gp, &q, true).unwrap();
    for i in 0..4 {
        assert!((a.components[0].mean[i] - b.mean[i]).abs() < 1e-8);
        assert!((a.components[0].variance[i] - b.variance[i]).abs() < 1e-8);
    }
}

#[test]
fn far_queries_revert_to_prior_means() {
    let (x, y) = small_instance(6, 15);
    let model = OmgpModel::new(&x, &y, two_component_prior(0.2), random_rows(6, 2, 16, 0.1), None).unwrap();
    let p = omgp_predict(&model, &[40.0]).unwrap();
    for (k, c) in model.prior.component_priors.iter().enumerate() {
        assert!((p.components[k].mean[0] - c.mean.eval(40.0)).abs() < 1e-6);
    }
}

#[test]
fn prediction_matches_dense_oracle_with_explicit_inverse_weights() {
    let (x, y) = small_instance(5, 17);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut pi = Vec::new();
    for _ in 0..5 {
        let p = 0.1 + 0.1 * rng.random_range(0..9) as f64;
        pi.extend([p, 1.0 - p]);
    }
    let resp = Responsibilities::new(5, 2, pi).unwrap();
    let model = OmgpModel::new(&x, &y, two_component_prior(0.3), resp.clone(), None).unwrap();
    let q = [-1.0, 0.2, 1.3];
    let pred = omgp_predict_latent(&model, &q, true, true).unwrap();
    for (k, c) in model.prior.component_priors.iter().enumerate() {
        let kmat = kernel_matrix(&x, &x, |a, b| c.kernel.eval(a, b));
        let binv: Vec<f64> = resp.column(k).iter().map(|p| 0.09 / p).collect();
        let (ainv, _) = inverse(&add(&kmat, &diag(&binv)));
        let ksx = kernel_matrix(&q, &x, |a, b| c.kernel.eval(a, b));
        let r: Vec<f64> = x.iter().zip(&y).map(|(&a, &b)| b - c.mean.eval(a)).collect();
        let mu = matvec(&matmul(&ksx, &ainv), &r);
        let red = matmul(&matmul(&ksx, &ainv), &transpose(&ksx));
        for a in 0..3 {
            assert!((pred[k].mean[a] - (c.mean.eval(q[a]) + mu[a])).abs() < 1e-6);
            for b in 0..3 {
                let mut cov = c.kernel.eval(q[a], q[b]) - red[a][b];
                if a == b {
                    cov += 0.09;
                    assert!((pred[k].variance[a] - cov).abs() < 1e-6);
                }
                assert!((pred[k].covariance.as_ref().unwrap()[(a, b)] - cov).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn map_labels_break_ties_low() {
    let (x, y) = small_instance(3, 19);
    let c = two_component_prior(0.2).component_priors[0];
    let prior = OmgpPrior::new(vec![c, c, c], 0.2).unwrap();
    let pi = vec![1.0, 0.0, 0.0, 0.5, 0.5, 0.0, 0.2, 0.3, 0.5];
    let model = OmgpModel::new(&x, &y, prior, Responsibilities::new(3, 3, pi).unwrap(), None).unwrap();
    assert_eq!(classify_train(&model), vec![0, 0, 2]);
}

#[test]
fn class_posterior_properties() {
    let (x, y, labels) = two_lines(60, 20);
    let model = fit_omgp(&x, &y, &two_line_prior(), &OmgpConfig::default()).unwrap();
    let acc = classify_train(&model).iter().zip(&labels).filter(|(a, b)| a == b).count();
    assert_eq!(acc, 60);
    for &(xs, ys) in &[(0.0, 0.0), (0.5, 3.0), (-0.7, -1.0)] {
        let p = classify_posterior(&model, xs, ys).unwrap();
        assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let pred = omgp_predict(&model, &[0.4]).unwrap();
    let p = classify_posterior(&model, 0.4, pred.components[1].mean[0]).unwrap();
    assert_eq!(p.map, 1);
    assert!(p.probabilities[1] >= 0.99);

    let (x, y) = small_instance(5, 21);
    let c = two_component_prior(0.2).component_priors[0];
    let prior = OmgpPrior::new(vec![c, c], 0.2).unwrap();
    let same = OmgpModel::new(&x, &y, prior, Responsibilities::uniform(5, 2), None).unwrap();
    let p = classify_posterior(&same, 0.3, 0.7).unwrap();
    assert_eq!(p.probabilities[0], p.probabilities[1]);
}

#[test]
fn permuting_components_permutes_outputs() {
    let (x, y) = small_instance(6, 22);
    let prior = two_component_prior(0.25);
    let resp = random_rows(6, 2, 23, 0.1);
    let swapped_prior = OmgpPrior::new(
        vec![prior.component_priors[1], prior.component_priors[0]],
        0.25,
    )
    .unwrap();
    let swapped_rows: Vec<f64> = resp.rows().flat_map(|r| [r[1], r[0]]).collect();
    let cfg = OmgpConfig::default();
    let a = e_step(OmgpModel::new(&x, &y, prior, resp, None).unwrap(), &cfg).unwrap();
    let b = e_step(
        OmgpModel::new(&x, &y, swapped_prior, Responsibilities::new(6, 2, swapped_rows).unwrap(), None).unwrap(),
        &cfg,
    )
    .unwrap();
    assert!((a.final_bound() - b.final_bound()).abs() < 1e-9);
    for i in 0..6 {
        assert!((a.responsibilities.get(i, 0) - b.responsibilities.get(i, 1)).abs() < 1e-9);
    }
    let pa = omgp_predict(&a, &[0.1]).unwrap();
    let pb = omgp_predict(&b, &[0.1]).unwrap();
    assert!((pa.components[0].mean[0] - pb.components[1].mean[0]).abs() < 1e-9);
}

#[test]
fn heteroscedastic_update_on_homoscedastic_data() {
    let (x, y, _) = two_lines(200, 24);
    let cfg = OmgpConfig::default();
    let model = fit_omgp(&x, &y, &two_line_prior(), &cfg).unwrap();
    let het = heteroscedastic_update(model, &cfg).unwrap();
    let nps = het.noise_processes.as_ref().unwrap();
    assert_eq!(nps.len(), 2);
    let q: Vec<f64> = (0..20).map(|i| -0.95 + 0.1 * i as f64).collect();
    for np in nps {
        for r in predict_noise(np, &q) {
            assert!((0.0025 / 2.0..=0.0025 * 2.0).contains(&r), "r = {r}");
        }
    }
    for row in het.responsibilities.rows() {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn sparse_component_keeps_shared_noise() {
    let (mut x, mut y, _) = two_lines(60, 25);
    x.retain(|_| true);
    for i in 0..60 {
        if i % 2 == 1 && i > 10 {
            y[i] = 1.0 + 0.3 * x[i];
        }
    }
    let model = OmgpModel::new(&x, &y, two_line_prior(), perturbed_uniform(60, 2, 0.05, 3), None).unwrap();
    let first = responsibilities_from_prior(&model);
    let model = model.with_state(two_line_prior(), first).unwrap();
    let model = e_step(model, &OmgpConfig::default()).unwrap();
    let counts = classify_train(&model).iter().filter(|&&l| l == 1).count();
    assert!(counts < 10, "{counts}");
    let s2 = model.prior.shared_noise_std.powi(2);
    let het = heteroscedastic_update(model, &OmgpConfig::default()).unwrap();
    let r = predict_noise(&het.noise_processes.as_ref().unwrap()[1], &[0.0, 0.5]);
    assert!((r[0] - s2).abs() < 1e-12 * s2.max(1.0));
}

#[test]
fn fit_requires_five_points_per_component() {
    let (x, y) = small_instance(9, 26);
    assert!(matches!(
        fit_omgp(&x, &y, &two_line_prior(), &OmgpConfig::default()),
        Err(Error::InsufficientData(_))
    ));
}

