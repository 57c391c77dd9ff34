//! Checkpoint files: one JSON document holding a format version, the model
//! and training configs, and every parameter as `{shape, values}` with values
//! written as 17-significant-digit decimal strings. Keys are sorted, so
//! saving a loaded checkpoint reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::tensor::Tensor;
use crate::training::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    shape: Vec<usize>,
    values: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Document {
    format_version: u32,
    model_config: ModelConfig,
    train_config: Option<TrainConfig>,
    fixed_sigma: Option<f64>,
    params: BTreeMap<String, TensorRecord>,
}

/// A trained model with the settings it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub train_config: Option<TrainConfig>,
    /// Constant predictive scale for models trained without a scale head.
    pub fixed_sigma: Option<f64>,
}

fn encode_value(v: f64) -> String {
    format!("{v:.16e}")
}

impl Checkpoint {
    pub fn to_text(&self) -> Result<String> {
        let params = self
            .model
            .params
            .iter()
            .map(|(name, t)| {
                (
                    name.clone(),
                    TensorRecord {
                        shape: t.shape().to_vec(),
                        values: t.data().iter().map(|&v| encode_value(v)).collect(),
                    },
                )
            })
            .collect();
        let doc = Document {
            format_version: FORMAT_VERSION,
            model_config: self.model.config.clone(),
            train_config: self.train_config.clone(),
            fixed_sigma: self.fixed_sigma,
            params,
        };
        let mut s =
            serde_json::to_string_pretty(&doc).map_err(|e| Error::Format(format!("serializing checkpoint: {e}")))?;
        s.push('\n');
        Ok(s)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let doc: Document = serde_json::from_str(text).map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
        if doc.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint format version {}, expected {FORMAT_VERSION}",
                doc.format_version
            )));
        }
        let mut tensors = BTreeMap::new();
        for (name, rec) in doc.params {
            let values = rec
                .values
                .iter()
                .map(|s| {
                    s.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::Format(format!("parameter {name}: bad value {s:?}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            let t = Tensor::new(rec.shape, values).map_err(|e| Error::Format(format!("parameter {name}: {e}")))?;
            tensors.insert(name, t);
        }
        let model = Model::new(doc.model_config, ModelParams::from_map(tensors))?;
        Ok(Self {
            model,
            train_config: doc.train_config,
            fixed_sigma: doc.fixed_sigma,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Writes `model` (and optionally its training config) to `path`.
pub fn save_checkpoint(model: &Model, train_config: Option<&TrainConfig>, path: &Path) -> Result<()> {
    Checkpoint {
        model: model.clone(),
        train_config: train_config.cloned(),
        fixed_sigma: None,
    }
    .save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
