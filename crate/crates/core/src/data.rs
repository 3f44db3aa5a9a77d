//! Ingestion, normalization, outlier filtering, splitting and a labelled
//! synthetic generator.

use std::path::Path;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functions::{MeanSpec, SoftClipMean};

/// One ten-minute SCADA observation in physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub turbine_id: String,
    pub timestamp: Option<DateTime<Utc>>,
    /// m/s
    pub wind_speed: f64,
    /// kW
    pub power: f64,
    /// Generator component, present only for synthetic files.
    pub label: Option<usize>,
}

/// Column names used when reading or writing a CSV file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub turbine_id: String,
    pub timestamp: Option<String>,
    pub wind_speed: String,
    pub power: String,
    pub label: Option<String>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            turbine_id: "turbine_id".into(),
            timestamp: Some("timestamp".into()),
            wind_speed: "wind_speed".into(),
            power: "power".into(),
            label: Some("label".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowDiagnostic {
    /// Line number in the file, header included.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadReport {
    pub records: Vec<RawRecord>,
    pub rejected: Vec<RowDiagnostic>,
}

impl LoadReport {
    pub fn n_rejected(&self) -> usize {
        self.rejected.len()
    }
}

/// Reads SCADA records. Rows with an unparsable, non-finite or negative wind
/// speed (or an unparsable power, timestamp or label) are rejected with a
/// diagnostic instead of failing the whole file.
///
/// Optional columns (`timestamp`, `label`) may be absent from the header.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<LoadReport> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(e, 1))?;
    let headers = reader.headers().map_err(|e| csv_error(e, 1))?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let require = |name: &str| {
        find(name).ok_or_else(|| Error::SchemaMismatch(format!("column `{name}` not found")))
    };
    let id_col = require(&schema.turbine_id)?;
    let ws_col = require(&schema.wind_speed)?;
    let pw_col = require(&schema.power)?;
    let ts_col = schema.timestamp.as_deref().and_then(find);
    let label_col = schema.label.as_deref().and_then(find);

    let mut records = Vec::new();
    let mut rejected = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| csv_error(e, line))?;
        let field = |c: usize| row.get(c).unwrap_or("");
        match parse_row(field(id_col), ts_col.map(field), field(ws_col), field(pw_col), label_col.map(field)) {
            Ok(r) => records.push(r),
            Err(message) => {
                log::warn!("line {line}: {message}");
                rejected.push(RowDiagnostic { line, message });
            }
        }
    }
    if !rejected.is_empty() {
        log::info!("{} of {} rows rejected", rejected.len(), rejected.len() + records.len());
    }
    Ok(LoadReport { records, rejected })
}

fn csv_error(e: csv::Error, line: usize) -> Error {
    let line = e.position().map_or(line, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::Parse {
            row: line,
            message: format!("{kind:?}"),
        },
    }
}

fn parse_row(
    id: &str,
    ts: Option<&str>,
    ws: &str,
    pw: &str,
    label: Option<&str>,
) -> std::result::Result<RawRecord, String> {
    let wind_speed: f64 = ws.parse().map_err(|_| format!("wind speed `{ws}` is not a number"))?;
    if !wind_speed.is_finite() || wind_speed < 0.0 {
        return Err(format!("wind speed {wind_speed} is negative or non-finite"));
    }
    let power: f64 = pw.parse().map_err(|_| format!("power `{pw}` is not a number"))?;
    if !power.is_finite() {
        return Err(format!("power {power} is non-finite"));
    }
    let timestamp = match ts {
        None | Some("") => None,
        Some(s) => Some(
            DateTime::parse_from_rfc3339(s)
                .map_err(|e| format!("timestamp `{s}`: {e}"))?
                .with_timezone(&Utc),
        ),
    };
    let label = match label {
        None | Some("") => None,
        Some(s) => Some(s.parse().map_err(|_| format!("label `{s}` is not an index"))?),
    };
    Ok(RawRecord {
        turbine_id: id.to_string(),
        timestamp,
        wind_speed,
        power,
        label,
    })
}

/// Writes records with the default column names; the label column is only
/// emitted when every record carries one.
pub fn write_csv(path: impl AsRef<Path>, records: &[RawRecord]) -> Result<()> {
    let with_labels = !records.is_empty() && records.iter().all(|r| r.label.is_some());
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(e, 0))?;
    let mut header = vec!["turbine_id", "timestamp", "wind_speed", "power"];
    if with_labels {
        header.push("label");
    }
    w.write_record(&header).map_err(|e| csv_error(e, 0))?;
    for r in records {
        let mut row = vec![
            r.turbine_id.clone(),
            r.timestamp
                .map(|t| t.to_rfc3339_opts(chrono::SecondsFormat::Secs, true))
                .unwrap_or_default(),
            format!("{:?}", r.wind_speed),
            format!("{:?}", r.power),
        ];
        if with_labels {
            row.push(r.label.unwrap_or_default().to_string());
        }
        w.write_record(&row).map_err(|e| csv_error(e, 0))?;
    }
    w.flush()?;
    Ok(())
}

/// Per-axis z-score statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub x_mean: f64,
    pub x_std: f64,
    pub y_mean: f64,
    pub y_std: f64,
}

impl NormStats {
    pub const IDENTITY: Self = Self {
        x_mean: 0.0,
        x_std: 1.0,
        y_mean: 0.0,
        y_std: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite();
        if !(ok(self.x_mean) && ok(self.y_mean)) {
            return Err(Error::InvalidConfig("normalization means must be finite".into()));
        }
        if !(self.x_std > 0.0 && ok(self.x_std)) {
            return Err(Error::DegenerateAxis("wind_speed"));
        }
        if !(self.y_std > 0.0 && ok(self.y_std)) {
            return Err(Error::DegenerateAxis("power"));
        }
        Ok(())
    }

    pub fn to_model_x(&self, wind_speed: f64) -> f64 {
        (wind_speed - self.x_mean) / self.x_std
    }

    pub fn to_model_y(&self, power: f64) -> f64 {
        (power - self.y_mean) / self.y_std
    }

    pub fn to_physical_x(&self, x: f64) -> f64 {
        x * self.x_std + self.x_mean
    }

    pub fn to_physical_y(&self, y: f64) -> f64 {
        y * self.y_std + self.y_mean
    }

    /// Converts a model-unit variance of `y` to physical units.
    pub fn to_physical_y_variance(&self, var: f64) -> f64 {
        var * self.y_std * self.y_std
    }
}

/// Training or test data in model units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub norm_stats: NormStats,
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(x: Vec<f64>, y: Vec<f64>, norm_stats: NormStats, labels: Option<Vec<usize>>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch(format!("{} inputs and {} targets", x.len(), y.len())));
        }
        if let Some(l) = &labels {
            if l.len() != x.len() {
                return Err(Error::DimensionMismatch(format!("{} labels for {} points", l.len(), x.len())));
            }
        }
        norm_stats.validate()?;
        Ok(Self {
            x,
            y,
            norm_stats,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// The points at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            x: idx.iter().map(|&i| self.x[i]).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            norm_stats: self.norm_stats,
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Physical-unit records; timestamps are not retained by a dataset.
    pub fn to_records(&self, turbine_id: &str) -> Vec<RawRecord> {
        (0..self.len())
            .map(|i| RawRecord {
                turbine_id: turbine_id.to_string(),
                timestamp: None,
                wind_speed: self.norm_stats.to_physical_x(self.x[i]),
                power: self.norm_stats.to_physical_y(self.y[i]),
                label: self.labels.as_ref().map(|l| l[i]),
            })
            .collect()
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Z-scores both axes with the population mean and standard deviation.
/// Labels are kept when every record has one.
pub fn normalize(records: &[RawRecord]) -> Result<Dataset> {
    if records.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "normalization needs at least 2 records, got {}",
            records.len()
        )));
    }
    let ws: Vec<f64> = records.iter().map(|r| r.wind_speed).collect();
    let pw: Vec<f64> = records.iter().map(|r| r.power).collect();
    let (x_mean, x_std) = mean_std(&ws);
    let (y_mean, y_std) = mean_std(&pw);
    let stats = NormStats {
        x_mean,
        x_std,
        y_mean,
        y_std,
    };
    stats.validate()?;
    let labels = records.iter().map(|r| r.label).collect::<Option<Vec<_>>>();
    Dataset::new(
        ws.iter().map(|&w| stats.to_model_x(w)).collect(),
        pw.iter().map(|&p| stats.to_model_y(p)).collect(),
        stats,
        labels,
    )
}

/// Applies existing statistics, e.g. to score new data against a fitted
/// model.
pub fn normalize_with(records: &[RawRecord], stats: NormStats) -> Result<Dataset> {
    let labels = records.iter().map(|r| r.label).collect::<Option<Vec<_>>>();
    Dataset::new(
        records.iter().map(|r| stats.to_model_x(r.wind_speed)).collect(),
        records.iter().map(|r| stats.to_model_y(r.power)).collect(),
        stats,
        labels,
    )
}

/// `(wind_speed, power)` pairs in physical units.
pub fn denormalize(ds: &Dataset) -> Vec<(f64, f64)> {
    let s = &ds.norm_stats;
    ds.x.iter().zip(&ds.y).map(|(&x, &y)| (s.to_physical_x(x), s.to_physical_y(y))).collect()
}

pub const DEFAULT_KNN_K: usize = 10;
pub const DEFAULT_KNN_QUANTILE: f64 = 0.995;

/// Linear-interpolation sample quantile of sorted data (type 7).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Distance from every point to its `k`-th nearest neighbour in `(x, y)`.
pub fn kth_neighbour_distances(x: &[f64], y: &[f64], k: usize) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .into_par_iter()
        .map_init(
            || Vec::with_capacity(n),
            |d2, i| {
                d2.clear();
                for j in 0..n {
                    if j != i {
                        let (dx, dy) = (x[i] - x[j], y[i] - y[j]);
                        d2.push(dx * dx + dy * dy);
                    }
                }
                let (_, kth, _) = d2.select_nth_unstable_by(k - 1, f64::total_cmp);
                kth.sqrt()
            },
        )
        .collect()
}

/// Removes points whose `k`-th nearest-neighbour distance is strictly above
/// the `quantile` of all such distances. Returns the kept data and the
/// removed indices in ascending order.
pub fn knn_outlier_filter(ds: &Dataset, k: usize, quantile: f64) -> Result<(Dataset, Vec<usize>)> {
    if !(quantile > 0.0 && quantile <= 1.0) {
        return Err(Error::InvalidQuantile(quantile));
    }
    if k == 0 || k >= ds.len() {
        return Err(Error::InvalidConfig(format!(
            "k must lie in [1, N) for N = {}, got {k}",
            ds.len()
        )));
    }
    let dist = kth_neighbour_distances(&ds.x, &ds.y, k);
    let mut sorted = dist.clone();
    sorted.sort_by(f64::total_cmp);
    let cut = quantile_sorted(&sorted, quantile);
    let (removed, kept): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|&i| dist[i] > cut);
    Ok((ds.subset(&kept), removed))
}

/// Seeded random partition of `0..n` into `⌊fraction·n⌋` training indices
/// and the rest, each in ascending order.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n_train = (train_fraction * n as f64).floor() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test = idx.split_off(n_train);
    idx.sort_unstable();
    test.sort_unstable();
    Ok((idx, test))
}

/// [`split_indices`] applied to a dataset.
pub fn split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(ds.len(), train_fraction, seed)?;
    Ok((ds.subset(&train), ds.subset(&test)))
}

/// Standard deviation of the generating noise as a function of input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NoiseProfile {
    Constant { std: f64 },
    /// `floor + (peak − floor)·exp(−(x − center)²/(2 width²))`
    Bell {
        floor: f64,
        peak: f64,
        center: f64,
        width: f64,
    },
}

impl NoiseProfile {
    pub fn std_at(&self, x: f64) -> f64 {
        match *self {
            Self::Constant { std } => std,
            Self::Bell {
                floor,
                peak,
                center,
                width,
            } => {
                let z = (x - center) / width;
                floor + (peak - floor) * (-0.5 * z * z).exp()
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::Constant { std } => std >= 0.0 && std.is_finite(),
            Self::Bell {
                floor,
                peak,
                center,
                width,
            } => floor >= 0.0 && peak >= 0.0 && center.is_finite() && width > 0.0 && peak.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid noise profile {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub mean: MeanSpec,
    pub noise: NoiseProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_points: usize,
    pub component_weights: Vec<f64>,
    pub component_specs: Vec<ComponentSpec>,
    pub x_range: (f64, f64),
    pub seed: u64,
}

/// Generator curves share one rising flank: the soft-clip coordinate is 0
/// at `x = 0.25` and reaches the plateau where the ideal line (slope 4/3)
/// meets it.
fn clipped_curve(alpha1: f64) -> SoftClipMean {
    let (cut_in, slope) = (0.25, 4.0 / 3.0);
    let alpha2 = slope / alpha1;
    SoftClipMean {
        alpha1,
        alpha2,
        alpha3: -alpha2 * cut_in,
        beta: 10.0,
    }
}

fn bell_noise() -> NoiseProfile {
    NoiseProfile::Bell {
        floor: 0.01,
        peak: 0.04,
        center: 0.7,
        width: 0.2,
    }
}

impl SynthConfig {
    /// Ideal curve (plateau 1), 50% curtailment and zero output, with
    /// weights (0.5, 0.3, 0.2) and bell-shaped noise on the two curves.
    pub fn three_trend(n_points: usize, seed: u64) -> Self {
        Self {
            n_points,
            component_weights: vec![0.5, 0.3, 0.2],
            component_specs: vec![
                ComponentSpec {
                    mean: MeanSpec::SoftClip(clipped_curve(1.0)),
                    noise: bell_noise(),
                },
                ComponentSpec {
                    mean: MeanSpec::SoftClip(clipped_curve(0.5)),
                    noise: bell_noise(),
                },
                ComponentSpec {
                    mean: MeanSpec::Constant { level: 0.0 },
                    noise: NoiseProfile::Constant { std: 0.01 },
                },
            ],
            x_range: (0.4, 2.0),
            seed,
        }
    }

    /// [`Self::three_trend`] plus an 80% curtailment.
    pub fn four_trend(n_points: usize, seed: u64) -> Self {
        let mut cfg = Self::three_trend(n_points, seed);
        cfg.component_weights = vec![0.35, 0.25, 0.25, 0.15];
        cfg.component_specs.insert(
            1,
            ComponentSpec {
                mean: MeanSpec::SoftClip(clipped_curve(0.8)),
                noise: bell_noise(),
            },
        );
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_points == 0 {
            return Err(Error::InvalidConfig("n_points must be at least 1".into()));
        }
        let k = self.component_weights.len();
        if k == 0 || k != self.component_specs.len() {
            return Err(Error::DimensionMismatch(format!(
                "{k} weights for {} components",
                self.component_specs.len()
            )));
        }
        let s: f64 = self.component_weights.iter().sum();
        if self.component_weights.iter().any(|w| !(*w >= 0.0)) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSimplex(format!("component weights sum to {s}")));
        }
        let (lo, hi) = self.x_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::InvalidConfig(format!("invalid x range {:?}", self.x_range)));
        }
        for c in &self.component_specs {
            c.mean.validate()?;
            c.noise.validate()?;
        }
        Ok(())
    }

    /// Noise-free value of component `k` at `x`.
    pub fn true_mean(&self, k: usize, x: f64) -> f64 {
        self.component_specs[k].mean.eval(x)
    }
}

/// Draws a labelled dataset in model units (identity normalization).
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (lo, hi) = cfg.x_range;
    let mut cumulative: Vec<f64> = cfg
        .component_weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    *cumulative.last_mut().expect("validated non-empty") = f64::INFINITY;
    let mut x = Vec::with_capacity(cfg.n_points);
    let mut y = Vec::with_capacity(cfg.n_points);
    let mut labels = Vec::with_capacity(cfg.n_points);
    for _ in 0..cfg.n_points {
        let xi = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let u: f64 = rng.random();
        let k = cumulative.iter().position(|&c| u < c).expect("last bound is infinite");
        let k = if cfg.component_weights[k] == 0.0 {
            // `u` landed on a zero-width bucket boundary.
            (0..k).rev().find(|&j| cfg.component_weights[j] > 0.0).unwrap_or(k)
        } else {
            k
        };
        let e: f64 = StandardNormal.sample(&mut rng);
        let spec = &cfg.component_specs[k];
        x.push(xi);
        y.push(spec.mean.eval(xi) + spec.noise.std_at(xi) * e);
        labels.push(k);
    }
    Dataset::new(x, y, NormStats::IDENTITY, Some(labels))
}

/// Physical records for a synthetic dataset, stamped at ten-minute
/// intervals from 2020-01-01.
pub fn synthetic_records(ds: &Dataset, turbine_id: &str) -> Vec<RawRecord> {
    let start = Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).single().expect("valid date");
    let mut out = ds.to_records(turbine_id);
    for (i, r) in out.iter_mut().enumerate() {
        r.timestamp = Some(start + Duration::minutes(10 * i as i64));
    }
    out
}
