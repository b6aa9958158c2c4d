//! Loading source rows from files or planted models.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lopub::eval::PlantedModel;
use lopub::reduce::DependencyGraph;
use lopub::schema::{load_dataset, Dataset, Schema};
use serde::Deserialize;

use crate::SourceArgs;

/// Source section of an evaluation document. Relative paths are taken from
/// the document's directory.
#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum SourceSpec {
    Files { schema: PathBuf, data: PathBuf },
    /// An explicit planted model, inline or as a path to its document.
    Planted { model: ModelRef, rows: usize, seed: Option<u64> },
    /// A randomly drawn planted model.
    Random {
        cardinalities: Vec<usize>,
        groups: Vec<Vec<usize>>,
        coupling: f64,
        model_seed: u64,
        rows: usize,
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ModelRef {
    Path(PathBuf),
    Inline(PlantedModel),
}

/// Source rows plus the planted graph when the model is known.
pub struct Source {
    pub data: Dataset,
    pub model: Option<PlantedModel>,
}

impl Source {
    pub fn truth(&self, phi: f64) -> Option<DependencyGraph> {
        self.model.as_ref().map(|m| m.truth_graph(phi))
    }
}

pub fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

pub fn load_schema(path: &Path) -> Result<Schema> {
    Schema::from_json(&read(path)?).with_context(|| format!("invalid schema {}", path.display()))
}

pub fn load_files(schema: &Path, data: &Path) -> Result<Dataset> {
    let schema = load_schema(schema)?;
    load_dataset(&read(data)?, &schema).with_context(|| format!("invalid dataset {}", data.display()))
}

fn load_model(path: &Path) -> Result<PlantedModel> {
    serde_json::from_str(&read(path)?).with_context(|| format!("invalid planted model {}", path.display()))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl SourceSpec {
    pub fn load(&self, base: &Path, seed: u64) -> Result<Source> {
        Ok(match self {
            SourceSpec::Files { schema, data } => {
                Source { data: load_files(&resolve(base, schema), &resolve(base, data))?, model: None }
            }
            SourceSpec::Planted { model, rows, seed: s } => {
                let model = match model {
                    ModelRef::Path(p) => load_model(&resolve(base, p))?,
                    ModelRef::Inline(m) => m.clone(),
                };
                Source { data: model.sample(*rows, s.unwrap_or(seed)), model: Some(model) }
            }
            SourceSpec::Random { cardinalities, groups, coupling, model_seed, rows, seed: s } => {
                let model = PlantedModel::random(cardinalities, groups, *coupling, *model_seed)?;
                Source { data: model.sample(*rows, s.unwrap_or(seed)), model: Some(model) }
            }
        })
    }
}

impl SourceArgs {
    pub fn load(&self, seed: u64) -> Result<Source> {
        match (&self.schema, &self.data, &self.planted, self.rows) {
            (Some(s), Some(d), None, _) => Ok(Source { data: load_files(s, d)?, model: None }),
            (None, None, Some(m), Some(rows)) => {
                let model = load_model(m)?;
                Ok(Source { data: model.sample(rows, seed), model: Some(model) })
            }
            _ => bail!("give either --schema and --data, or --planted and --rows"),
        }
    }
}
