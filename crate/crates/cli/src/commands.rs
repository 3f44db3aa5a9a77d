use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::SecondsFormat;
use serde_json::json;

use curvemix::data::{
    generate_synthetic, knn_outlier_filter, load_csv, normalize, normalize_with, split_indices, synthetic_records,
    write_csv, CsvSchema, Dataset, RawRecord, SynthConfig,
};
use curvemix::gp::{fit_gp, gp_predict, GpPrior, MeanKind};
use curvemix::hetgp::{fit_hetgp, hetgp_predict, HetGpConfig};
use curvemix::monitoring::{
    cross_validate_k, default_entropy_threshold, entropy, evaluate, matched_accuracy, score_stream, simplex_coords,
};
use curvemix::omgp::{fit_omgp, heteroscedastic_update, omgp_predict_latent, OmgpConfig, OmgpPrior};
use curvemix::optimize::OptimizerConfig;
use curvemix::persist::{load_model, save_model, Model, SavedModel};
use curvemix::predictive::{argmax, component_posterior, ComponentPredictor, PredictiveDistribution};

use crate::{
    ClassifyArgs, CliError, Command, CrossvalArgs, EvaluateArgs, FilterArgs, FitArgs, GenerateArgs, Kind,
    MonitorArgs, PredictArgs, Preset, SchemaArgs,
};

type CliResult<T = ()> = Result<T, CliError>;

/// Shortest round-trip representation, switching to exponent form for very
/// small or large magnitudes.
fn num(v: f64) -> String {
    format!("{v:?}")
}

pub fn run(command: Command) -> CliResult {
    match command {
        Command::Generate(a) => generate(a),
        Command::Filter(a) => filter(a),
        Command::Fit(a) => fit(a),
        Command::Predict(a) => predict(a),
        Command::Classify(a) => classify(a),
        Command::Monitor(a) => monitor(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Crossval(a) => crossval(a),
    }
}

fn schema(a: &SchemaArgs) -> CsvSchema {
    CsvSchema {
        turbine_id: a.turbine_column.clone(),
        timestamp: Some(a.timestamp_column.clone()),
        wind_speed: a.wind_speed_column.clone(),
        power: a.power_column.clone(),
        label: Some(a.label_column.clone()),
    }
}

fn read_records(path: &Path, schema: &CsvSchema) -> CliResult<Vec<RawRecord>> {
    let report = load_csv(path, schema)?;
    if report.n_rejected() > 0 {
        log::warn!("{}: {} rows rejected", path.display(), report.n_rejected());
    }
    Ok(report.records)
}

fn print_summary(value: serde_json::Value) -> CliResult {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, &value)?;
    writeln!(out)?;
    Ok(())
}

fn check_fraction(f: f64) -> CliResult {
    if f > 0.0 && f <= 1.0 {
        Ok(())
    } else {
        Err(CliError::Usage(format!("--train-frac must lie in (0, 1], got {f}")))
    }
}

/// Training and held-out indices; everything is training data when the
/// fraction is one.
fn partition(n: usize, frac: f64, seed: u64) -> CliResult<(Vec<usize>, Vec<usize>)> {
    check_fraction(frac)?;
    if frac == 1.0 {
        return Ok(((0..n).collect(), Vec::new()));
    }
    Ok(split_indices(n, frac, seed)?)
}

fn generate(a: GenerateArgs) -> CliResult {
    let n = a.n as usize;
    let cfg = match a.preset {
        Preset::ThreeTrend => SynthConfig::three_trend(n, a.seed),
        Preset::FourTrend => SynthConfig::four_trend(n, a.seed),
    };
    let ds = generate_synthetic(&cfg)?;
    write_csv(&a.out, &synthetic_records(&ds, &a.turbine_id))?;
    log::info!("wrote {n} synthetic rows to {}", a.out.display());
    Ok(())
}

fn filter(a: FilterArgs) -> CliResult {
    let records = read_records(&a.data, &schema(&a.schema))?;
    let ds = normalize(&records)?;
    let (_, removed) = knn_outlier_filter(&ds, a.neighbours, a.quantile)?;
    let mut drop = removed.iter().peekable();
    let kept: Vec<RawRecord> = records
        .into_iter()
        .enumerate()
        .filter(|(i, _)| {
            if drop.peek() == Some(&i) {
                drop.next();
                false
            } else {
                true
            }
        })
        .map(|(_, r)| r)
        .collect();
    write_csv(&a.out, &kept)?;
    log::info!("removed {} of {} rows", removed.len(), removed.len() + kept.len());
    print_summary(json!({ "kept": kept.len(), "removed": removed }))
}

fn optimizer(base: OptimizerConfig, restarts: Option<u64>, max_iters: Option<u64>, seed: u64) -> OptimizerConfig {
    let mut opt = base.with_seed(seed);
    if let Some(r) = restarts {
        opt.restarts = r as usize;
    }
    if let Some(m) = max_iters {
        opt.max_iters = m as usize;
    }
    opt
}

fn fit(a: FitArgs) -> CliResult {
    let records = read_records(&a.data, &schema(&a.schema))?;
    let ds = normalize(&records)?;
    let (train_idx, test_idx) = partition(ds.len(), a.train_frac, a.seed)?;
    let train = ds.subset(&train_idx);
    if let Some(path) = &a.test_out {
        let test: Vec<RawRecord> = test_idx.iter().map(|&i| records[i].clone()).collect();
        write_csv(path, &test)?;
    }
    let (x, y) = (&train.x, &train.y);
    let (model, objective) = match a.kind {
        Kind::Gp => {
            let opt = optimizer(OptimizerConfig::default(), a.restarts, a.max_iters, a.seed);
            let m = fit_gp(x, y, &GpPrior::default_for(x, y, MeanKind::SoftClip), &opt)?;
            let nlml = m.nlml();
            log::info!("negative log marginal likelihood {nlml:.6}");
            (Model::Gp(m), json!({ "nlml": nlml }))
        }
        Kind::Hetgp => {
            let cfg = HetGpConfig {
                seed: a.seed,
                optimizer: optimizer(OptimizerConfig::default(), a.restarts, a.max_iters, a.seed),
                ..HetGpConfig::default()
            };
            let m = fit_hetgp(x, y, &GpPrior::default_for(x, y, MeanKind::SoftClip), &cfg)?;
            let jll = m.history.last().copied().unwrap_or(f64::NAN);
            log::info!("joint log-likelihood {jll:.6}");
            (Model::HetGp(m), json!({ "joint_log_likelihood": jll }))
        }
        Kind::Omgp | Kind::OmgpHet => {
            let defaults = OmgpConfig::default();
            let mut cfg = OmgpConfig {
                seed: a.seed,
                optimizer: optimizer(defaults.optimizer.clone(), a.restarts, a.max_iters, a.seed),
                ..defaults
            };
            cfg.het.seed = a.seed;
            if let Some(m) = a.max_em {
                cfg.max_em = m as usize;
            }
            let prior = OmgpPrior::template(x, y, a.k as usize)?;
            let mut m = fit_omgp(x, y, &prior, &cfg)?;
            if a.kind == Kind::OmgpHet {
                m = heteroscedastic_update(m, &cfg)?;
            }
            let bound = m.final_bound();
            log::info!("final corrected bound {bound:.6}");
            (Model::Omgp(m), json!({ "final_bound": bound }))
        }
    };
    let saved = SavedModel {
        model,
        norm_stats: ds.norm_stats,
        seed: a.seed,
    };
    save_model(&saved, &a.out)?;
    log::info!("model written to {}", a.out.display());
    print_summary(json!({
        "model_kind": saved.model.kind().to_string(),
        "n_train": train_idx.len(),
        "n_test": test_idx.len(),
        "objective": objective,
        "out": a.out.display().to_string(),
    }))
}

fn latent_predictives(model: &Model, q: &[f64], with_noise: bool) -> CliResult<Vec<PredictiveDistribution>> {
    Ok(match model {
        Model::Gp(m) => vec![gp_predict(m, q, with_noise)?],
        Model::HetGp(m) => vec![hetgp_predict(m, q, with_noise)?],
        Model::Omgp(m) => omgp_predict_latent(m, q, with_noise, false)?,
    })
}

fn predict(a: PredictArgs) -> CliResult {
    let saved = load_model(&a.model)?;
    let s = saved.norm_stats;
    let train_x = saved.model.train_x();
    let lo_model = train_x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi_model = train_x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = a.min.unwrap_or_else(|| s.to_physical_x(lo_model));
    let hi = a.max.unwrap_or_else(|| s.to_physical_x(hi_model));
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(CliError::Usage(format!("invalid grid [{lo}, {hi}]")));
    }
    let n = a.points as usize;
    let grid: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    let q: Vec<f64> = grid.iter().map(|&w| s.to_model_x(w)).collect();
    let preds = latent_predictives(&saved.model, &q, !a.latent)?;
    let weights = saved.model.query_weights();
    let mut w = csv::Writer::from_path(&a.out)?;
    w.write_record(["wind_speed", "component", "weight", "mean", "std", "lower_3sigma", "upper_3sigma"])?;
    for (k, p) in preds.iter().enumerate() {
        for i in 0..n {
            let mean = s.to_physical_y(p.mean[i]);
            let sd = p.variance[i].sqrt() * s.y_std;
            w.write_record([
                num(grid[i]),
                k.to_string(),
                num(weights[k]),
                num(mean),
                num(sd),
                num(mean - 3.0 * sd),
                num(mean + 3.0 * sd),
            ])?;
        }
    }
    w.flush()?;
    log::info!("wrote {} curves of {n} points to {}", preds.len(), a.out.display());
    Ok(())
}

fn scoring_data(model_path: &Path, data: &Path, schema_args: &SchemaArgs) -> CliResult<(SavedModel, Vec<RawRecord>, Dataset)> {
    let saved = load_model(model_path)?;
    let records = read_records(data, &schema(schema_args))?;
    let ds = normalize_with(&records, saved.norm_stats)?;
    Ok((saved, records, ds))
}

fn classify(a: ClassifyArgs) -> CliResult {
    let (saved, records, ds) = scoring_data(&a.model, &a.data, &a.schema)?;
    let k = saved.model.n_components();
    let preds = saved.model.component_predictives(&ds.x)?;
    let weights = saved.model.query_weights();
    let mut w = csv::Writer::from_path(&a.out)?;
    let mut header: Vec<String> = ["turbine_id", "timestamp", "wind_speed", "power", "map_component", "entropy"]
        .map(String::from)
        .to_vec();
    header.extend((0..k).map(|j| format!("p{j}")));
    if k == 3 {
        header.extend(["simplex_x".to_string(), "simplex_y".to_string()]);
    }
    w.write_record(&header)?;
    let mut map = Vec::with_capacity(ds.len());
    let mut counts = vec![0usize; k];
    for (i, r) in records.iter().enumerate() {
        let p = component_posterior(&preds, &weights, i, ds.y[i]);
        let kk = argmax(&p);
        map.push(kk);
        counts[kk] += 1;
        let mut row = vec![
            r.turbine_id.clone(),
            r.timestamp
                .map(|t| t.to_rfc3339_opts(SecondsFormat::Secs, true))
                .unwrap_or_default(),
            num(r.wind_speed),
            num(r.power),
            kk.to_string(),
            num(entropy(&p)?),
        ];
        row.extend(p.iter().map(|&v| num(v)));
        if k == 3 {
            let (sx, sy) = simplex_coords(&p)?;
            row.extend([num(sx), num(sy)]);
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    let accuracy = ds.labels.as_ref().map(|l| matched_accuracy(&map, l));
    if let Some(acc) = accuracy {
        log::info!("label accuracy {:.4}", acc);
    }
    print_summary(json!({ "n": ds.len(), "per_component_counts": counts, "label_accuracy": accuracy }))
}

fn monitor(a: MonitorArgs) -> CliResult {
    let (saved, _, ds) = scoring_data(&a.model, &a.data, &a.schema)?;
    let threshold = a.threshold.unwrap_or_else(|| default_entropy_threshold(saved.model.n_components()));
    let obs: Vec<(f64, f64)> = ds.x.iter().copied().zip(ds.y.iter().copied()).collect();
    let records = score_stream(&saved.model, &obs, threshold)?;
    let mut out = BufWriter::new(File::create(&a.out)?);
    let s = saved.norm_stats;
    let mut flagged = 0usize;
    for mut r in records {
        r.x = s.to_physical_x(r.x);
        r.y = s.to_physical_y(r.y);
        flagged += usize::from(r.flagged);
        serde_json::to_writer(&mut out, &r)?;
        writeln!(out)?;
    }
    out.flush()?;
    log::info!("{flagged} of {} observations flagged", obs.len());
    print_summary(json!({ "n": obs.len(), "flagged": flagged, "threshold": threshold }))
}

fn evaluate_cmd(a: EvaluateArgs) -> CliResult {
    let (saved, _, ds) = scoring_data(&a.model, &a.data, &a.schema)?;
    let report = evaluate(&saved.model, &ds.x, &ds.y)?;
    let text = serde_json::to_string(&report)?;
    if let Some(path) = &a.out {
        std::fs::write(path, format!("{text}\n"))?;
    }
    println!("{text}");
    Ok(())
}

fn crossval(a: CrossvalArgs) -> CliResult {
    if a.k_min > a.k_max {
        return Err(CliError::Usage(format!("--k-min {} exceeds --k-max {}", a.k_min, a.k_max)));
    }
    let records = read_records(&a.data, &schema(&a.schema))?;
    let ds = normalize(&records)?;
    let (idx, _) = partition(ds.len(), a.train_frac, a.seed)?;
    let ds = ds.subset(&idx);
    let mut cfg = OmgpConfig::default();
    if let Some(m) = a.max_em {
        cfg.max_em = m as usize;
    }
    let cv = cross_validate_k(
        &ds.x,
        &ds.y,
        OmgpPrior::template,
        a.k_min as usize..=a.k_max as usize,
        a.repeats as usize,
        a.seed,
        &cfg,
    )?;
    let mut w = csv::Writer::from_path(&a.out)?;
    w.write_record(["k", "mean_bound", "std_bound", "lower_3sigma", "upper_3sigma", "repeats"])?;
    for s in &cv.per_k {
        w.write_record([
            s.k.to_string(),
            num(s.mean),
            num(s.std),
            num(s.mean - 3.0 * s.std),
            num(s.mean + 3.0 * s.std),
            s.bounds.len().to_string(),
        ])?;
    }
    w.flush()?;
    log::info!("selected K = {}", cv.selected_k);
    print_summary(json!({ "selected_k": cv.selected_k, "n": ds.len() }))
}
