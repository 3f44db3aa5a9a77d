//! Performance metrics, entropy-based novelty scoring and selection of the
//! number of components.

use std::ops::RangeInclusive;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::omgp::{fit_omgp, OmgpConfig, OmgpPrior};
use crate::predictive::{argmax, component_posterior, ComponentPredictor};

/// Each test point's MAP component and that component's predictive
/// (noise included).
#[derive(Debug, Clone, PartialEq)]
pub struct MapPredictions {
    pub map: Vec<usize>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

pub fn map_predictions(model: &impl ComponentPredictor, x: &[f64], y: &[f64]) -> Result<MapPredictions> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!("{} inputs and {} targets", x.len(), y.len())));
    }
    let preds = model.component_predictives(x)?;
    let weights = model.query_weights();
    let mut out = MapPredictions {
        map: Vec::with_capacity(x.len()),
        mean: Vec::with_capacity(x.len()),
        variance: Vec::with_capacity(x.len()),
    };
    for (i, &yi) in y.iter().enumerate() {
        let k = argmax(&component_posterior(&preds, &weights, i, yi));
        out.map.push(k);
        out.mean.push(preds[k].mean[i]);
        out.variance.push(preds[k].variance[i]);
    }
    Ok(out)
}

/// `100/(M σ²_y) Σ (μ − y)²` with the population variance of `y`.
pub fn nmse_from_predictions(mean: &[f64], y: &[f64]) -> Result<f64> {
    if mean.len() != y.len() {
        return Err(Error::DimensionMismatch(format!("{} predictions for {} targets", mean.len(), y.len())));
    }
    let m = y.len();
    if m < 2 {
        return Err(Error::InsufficientData(format!("NMSE needs at least 2 test points, got {m}")));
    }
    let y_bar = y.iter().sum::<f64>() / m as f64;
    let ss = y.iter().map(|v| (v - y_bar) * (v - y_bar)).sum::<f64>();
    if ss == 0.0 {
        return Err(Error::DegenerateTargets);
    }
    let sse: f64 = mean.iter().zip(y).map(|(mu, v)| (mu - v) * (mu - v)).sum();
    Ok(100.0 * (sse / ss))
}

/// Mean of `(μ − y)²/σ²` over the test points.
pub fn msd_from_predictions(mean: &[f64], variance: &[f64], y: &[f64]) -> Result<f64> {
    if mean.len() != y.len() || variance.len() != y.len() {
        return Err(Error::DimensionMismatch("predictions and targets differ in length".into()));
    }
    if y.is_empty() {
        return Err(Error::EmptyInput);
    }
    let total: f64 = mean
        .iter()
        .zip(variance)
        .zip(y)
        .map(|((mu, var), v)| (mu - v) * (mu - v) / var)
        .sum();
    Ok(total / y.len() as f64)
}

/// Normalized mean squared error in percent, each point scored against its
/// MAP component.
pub fn nmse(model: &impl ComponentPredictor, x: &[f64], y: &[f64]) -> Result<f64> {
    let p = map_predictions(model, x, y)?;
    nmse_from_predictions(&p.mean, y)
}

/// Mean Mahalanobis squared distance against the MAP component.
pub fn msd(model: &impl ComponentPredictor, x: &[f64], y: &[f64]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::EmptyInput);
    }
    let p = map_predictions(model, x, y)?;
    msd_from_predictions(&p.mean, &p.variance, y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub nmse_percent: f64,
    pub msd: f64,
    pub per_component_counts: Vec<usize>,
    pub n_test: usize,
}

pub fn evaluate(model: &impl ComponentPredictor, x: &[f64], y: &[f64]) -> Result<EvaluationReport> {
    let p = map_predictions(model, x, y)?;
    let mut per_component_counts = vec![0; model.n_components()];
    for &k in &p.map {
        per_component_counts[k] += 1;
    }
    Ok(EvaluationReport {
        nmse_percent: nmse_from_predictions(&p.mean, y)?,
        msd: msd_from_predictions(&p.mean, &p.variance, y)?,
        per_component_counts,
        n_test: y.len(),
    })
}

fn check_simplex(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidSimplex("empty vector".into()));
    }
    if p.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidSimplex("entries must be finite and non-negative".into()));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidSimplex(format!("entries sum to {s}")));
    }
    Ok(())
}

/// Shannon entropy in nats, with `0·log 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    check_simplex(p)?;
    let support = p.iter().filter(|&&v| v > 0.0);
    let first = support.clone().next().copied();
    if support.clone().all(|&v| Some(v) == first) {
        // Uniform over the support.
        return Ok((support.count() as f64).ln());
    }
    Ok(-support.map(|v| v * v.ln()).sum::<f64>())
}

/// Cartesian position of a 3-component posterior on the unit triangle
/// `(0,0)`, `(1,0)`, `(½, √3/2)`.
pub fn simplex_coords(p: &[f64]) -> Result<(f64, f64)> {
    if p.len() != 3 {
        return Err(Error::WrongDimension {
            expected: 3,
            got: p.len(),
        });
    }
    check_simplex(p)?;
    Ok((p[1] + 0.5 * p[2], 0.75f64.sqrt() * p[2]))
}

pub fn default_entropy_threshold(k: usize) -> f64 {
    0.8 * (k as f64).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoveltyRecord {
    pub x: f64,
    pub y: f64,
    pub posterior: Vec<f64>,
    /// nats
    pub entropy: f64,
    pub map_component: usize,
    pub flagged: bool,
}

/// Classifies each observation and flags it when its posterior entropy
/// exceeds `entropy_threshold`.
pub fn score_stream(
    model: &impl ComponentPredictor,
    observations: &[(f64, f64)],
    entropy_threshold: f64,
) -> Result<Vec<NoveltyRecord>> {
    if observations.is_empty() {
        return Ok(Vec::new());
    }
    let xs: Vec<f64> = observations.iter().map(|o| o.0).collect();
    let preds = model.component_predictives(&xs)?;
    let weights = model.query_weights();
    observations
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| {
            let posterior = component_posterior(&preds, &weights, i, y);
            let h = entropy(&posterior)?;
            Ok(NoveltyRecord {
                x,
                y,
                map_component: argmax(&posterior),
                entropy: h,
                flagged: h > entropy_threshold,
                posterior,
            })
        })
        .collect()
}

/// Fraction of points whose predicted label matches the truth under the
/// best one-to-one relabelling of the predicted components.
pub fn matched_accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(predicted.len(), truth.len(), "label vectors differ in length");
    if truth.is_empty() {
        return 1.0;
    }
    let kp = predicted.iter().max().map_or(0, |m| m + 1);
    let kt = truth.iter().max().map_or(0, |m| m + 1);
    let mut confusion = vec![vec![0usize; kt]; kp];
    for (&p, &t) in predicted.iter().zip(truth) {
        confusion[p][t] += 1;
    }
    fn best(confusion: &[Vec<usize>], row: usize, used: &mut Vec<bool>) -> usize {
        if row == confusion.len() {
            return 0;
        }
        // Leaving this predicted component unmatched.
        let mut top = best(confusion, row + 1, used);
        for t in 0..used.len() {
            if !used[t] {
                used[t] = true;
                top = top.max(confusion[row][t] + best(confusion, row + 1, used));
                used[t] = false;
            }
        }
        top
    }
    best(&confusion, 0, &mut vec![false; kt]) as f64 / truth.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KBoundStats {
    pub k: usize,
    pub bounds: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (divide by `repeats − 1`); zero for one
    /// repeat.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub per_k: Vec<KBoundStats>,
    pub selected_k: usize,
}

pub fn mean_and_sample_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|b| (b - mean) * (b - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Perturbation applied to the template hyperparameters on every repeat
/// after the first.
pub const CV_INIT_JITTER: f64 = 0.1;

/// Fits the mixture for every `K` in `k_range`, `repeats` times each with
/// distinct seeds, on the full data set. Reports the mean and spread of the
/// final corrected bound and the `K` with the largest mean.
pub fn cross_validate_k<F>(
    x: &[f64],
    y: &[f64],
    prior_template: F,
    k_range: RangeInclusive<usize>,
    repeats: usize,
    seed: u64,
    cfg: &OmgpConfig,
) -> Result<CrossValidation>
where
    F: Fn(&[f64], &[f64], usize) -> Result<OmgpPrior> + Sync,
{
    if repeats == 0 {
        return Err(Error::InvalidConfig("repeats must be at least 1".into()));
    }
    if k_range.is_empty() || *k_range.start() == 0 {
        return Err(Error::InvalidConfig(format!("invalid component range {k_range:?}")));
    }
    let jobs: Vec<(usize, usize)> = k_range.clone().flat_map(|k| (0..repeats).map(move |r| (k, r))).collect();
    let bounds: Vec<f64> = jobs
        .par_iter()
        .map(|&(k, r)| {
            let run_seed = seed.wrapping_add((k as u64) << 32).wrapping_add(r as u64);
            let mut prior = prior_template(x, y, k)?;
            if r > 0 {
                prior = prior.jittered(CV_INIT_JITTER, run_seed);
            }
            let mut run_cfg = cfg.clone();
            run_cfg.seed = run_seed;
            run_cfg.optimizer.seed = run_seed;
            let model = fit_omgp(x, y, &prior, &run_cfg)?;
            log::info!("crossval K={k} repeat {r}: bound {:.4}", model.final_bound());
            Ok(model.final_bound())
        })
        .collect::<Result<_>>()?;
    let per_k: Vec<KBoundStats> = bounds
        .chunks(repeats)
        .zip(k_range)
        .map(|(b, k)| {
            let (mean, std) = mean_and_sample_std(b);
            KBoundStats {
                k,
                bounds: b.to_vec(),
                mean,
                std,
            }
        })
        .collect();
    let means: Vec<f64> = per_k.iter().map(|s| s.mean).collect();
    let selected_k = per_k[argmax(&means)].k;
    Ok(CrossValidation { per_k, selected_k })
}
