//! JSON model files.
//!
//! A file carries everything needed to rebuild the posterior: training data,
//! hyperparameters, responsibilities and noise processes. Keys are written
//! in sorted order.

use std::path::Path;

use chrono::Utc;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::gp::{GpModel, GpPrior};
use crate::hetgp::{HetGpModel, NoiseProcess};
use crate::omgp::{OmgpModel, OmgpPrior, Responsibilities, TraceEntry};
use crate::predictive::{ComponentPredictor, PredictiveDistribution};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Gp,
    Hetgp,
    Omgp,
    OmgpHet,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Gp => "gp",
            ModelKind::Hetgp => "hetgp",
            ModelKind::Omgp => "omgp",
            ModelKind::OmgpHet => "omgp_het",
        })
    }
}

/// Any fitted model.
#[derive(Debug, Clone)]
pub enum Model {
    Gp(GpModel),
    HetGp(HetGpModel),
    Omgp(OmgpModel),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Gp(_) => ModelKind::Gp,
            Model::HetGp(_) => ModelKind::Hetgp,
            Model::Omgp(m) if m.noise_processes.is_some() => ModelKind::OmgpHet,
            Model::Omgp(_) => ModelKind::Omgp,
        }
    }

    pub fn train_x(&self) -> &[f64] {
        match self {
            Model::Gp(m) => m.train_x(),
            Model::HetGp(m) => m.train_x(),
            Model::Omgp(m) => m.train_x(),
        }
    }

    pub fn train_y(&self) -> &[f64] {
        match self {
            Model::Gp(m) => m.train_y(),
            Model::HetGp(m) => m.train_y(),
            Model::Omgp(m) => m.train_y(),
        }
    }

    pub fn as_omgp(&self) -> Option<&OmgpModel> {
        match self {
            Model::Omgp(m) => Some(m),
            _ => None,
        }
    }
}

impl ComponentPredictor for Model {
    fn n_components(&self) -> usize {
        match self {
            Model::Gp(m) => m.n_components(),
            Model::HetGp(m) => m.n_components(),
            Model::Omgp(m) => m.n_components(),
        }
    }

    fn component_predictives(&self, query: &[f64]) -> Result<Vec<PredictiveDistribution>> {
        match self {
            Model::Gp(m) => m.component_predictives(query),
            Model::HetGp(m) => m.component_predictives(query),
            Model::Omgp(m) => m.component_predictives(query),
        }
    }

    fn query_weights(&self) -> Vec<f64> {
        match self {
            Model::Gp(m) => m.query_weights(),
            Model::HetGp(m) => m.query_weights(),
            Model::Omgp(m) => m.query_weights(),
        }
    }
}

/// A model together with the context needed to use it on physical data.
#[derive(Debug, Clone)]
pub struct SavedModel {
    pub model: Model,
    pub norm_stats: NormStats,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Parameters {
    Gp {
        prior: GpPrior,
    },
    Hetgp {
        prior: GpPrior,
        noise_process: NoiseProcess,
    },
    Omgp {
        prior: OmgpPrior,
        responsibilities: Responsibilities,
        noise_processes: Option<Vec<NoiseProcess>>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FitRecord {
    seed: u64,
    /// Objective values during fitting: negative log marginal likelihood
    /// for `gp`, joint log-likelihood per outer round for `hetgp`.
    trace: Vec<f64>,
    bound_trace: Option<Vec<TraceEntry>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Metadata {
    created_at: String,
    library_version: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelFile {
    schema_version: u32,
    model_kind: ModelKind,
    norm_stats: NormStats,
    train_x: Vec<f64>,
    train_y: Vec<f64>,
    parameters: Parameters,
    fit: FitRecord,
    metadata: Metadata,
}

impl ModelFile {
    fn from_saved(saved: &SavedModel) -> Self {
        let (parameters, trace, bound_trace) = match &saved.model {
            Model::Gp(m) => (Parameters::Gp { prior: m.prior }, m.fit_trace.clone(), None),
            Model::HetGp(m) => (
                Parameters::Hetgp {
                    prior: m.prior,
                    noise_process: m.noise_process.clone(),
                },
                m.history.clone(),
                None,
            ),
            Model::Omgp(m) => (
                Parameters::Omgp {
                    prior: m.prior.clone(),
                    responsibilities: m.responsibilities.clone(),
                    noise_processes: m.noise_processes.clone(),
                },
                Vec::new(),
                Some(m.bound_trace.clone()),
            ),
        };
        Self {
            schema_version: SCHEMA_VERSION,
            model_kind: saved.model.kind(),
            norm_stats: saved.norm_stats,
            train_x: saved.model.train_x().to_vec(),
            train_y: saved.model.train_y().to_vec(),
            parameters,
            fit: FitRecord {
                seed: saved.seed,
                trace,
                bound_trace,
            },
            metadata: Metadata {
                created_at: Utc::now().to_rfc3339(),
                library_version: env!("CARGO_PKG_VERSION").to_string(),
            },
        }
    }

    fn into_saved(self) -> Result<SavedModel> {
        let corrupt = |e: Error| Error::CorruptModel(e.to_string());
        let (x, y) = (&self.train_x, &self.train_y);
        let model = match (self.model_kind, self.parameters) {
            (ModelKind::Gp, Parameters::Gp { prior }) => {
                let mut m = GpModel::condition(prior, x, y).map_err(corrupt)?;
                m.fit_trace = self.fit.trace;
                Model::Gp(m)
            }
            (ModelKind::Hetgp, Parameters::Hetgp { prior, noise_process }) => {
                let mut m = HetGpModel::from_parts(prior, x, y, noise_process).map_err(corrupt)?;
                m.history = self.fit.trace;
                Model::HetGp(m)
            }
            (
                kind @ (ModelKind::Omgp | ModelKind::OmgpHet),
                Parameters::Omgp {
                    prior,
                    responsibilities,
                    noise_processes,
                },
            ) => {
                if (kind == ModelKind::OmgpHet) != noise_processes.is_some() {
                    return Err(Error::CorruptModel(format!(
                        "model kind {kind} does not match the stored noise processes"
                    )));
                }
                let check = Responsibilities::new(
                    responsibilities.n_points(),
                    responsibilities.n_components(),
                    responsibilities.as_slice().to_vec(),
                );
                check.map_err(corrupt)?;
                let mut m = OmgpModel::new(x, y, prior, responsibilities, noise_processes).map_err(corrupt)?;
                m.bound_trace = self.fit.bound_trace.unwrap_or_default();
                Model::Omgp(m)
            }
            (kind, _) => {
                return Err(Error::CorruptModel(format!(
                    "parameters do not match model kind {kind}"
                )))
            }
        };
        self.norm_stats.validate().map_err(corrupt)?;
        Ok(SavedModel {
            model,
            norm_stats: self.norm_stats,
            seed: self.fit.seed,
        })
    }
}

/// Canonical JSON: sorted keys, two-space indentation.
pub fn to_json(saved: &SavedModel) -> Result<String> {
    let value = serde_json::to_value(ModelFile::from_saved(saved))
        .map_err(|e| Error::CorruptModel(format!("serialization failed: {e}")))?;
    let mut s = serde_json::to_string_pretty(&value)
        .map_err(|e| Error::CorruptModel(format!("serialization failed: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn from_json(text: &str) -> Result<SavedModel> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::CorruptModel(e.to_string()))?;
    let found = value
        .get("schema_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::CorruptModel("missing schema_version".into()))?;
    if found != u64::from(SCHEMA_VERSION) {
        return Err(Error::SchemaVersionMismatch {
            found: u32::try_from(found).unwrap_or(u32::MAX),
            expected: SCHEMA_VERSION,
        });
    }
    let file: ModelFile = serde_json::from_value(value).map_err(|e| Error::CorruptModel(e.to_string()))?;
    file.into_saved()
}

pub fn save_model(saved: &SavedModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_json(saved)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SavedModel> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    from_json(&std::fs::read_to_string(path)?)
}
