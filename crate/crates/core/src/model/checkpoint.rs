//! Versioned JSON checkpoints: the model configuration plus every named
//! parameter tensor with its shape.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

pub const CHECKPOINT_FORMAT: &str = "ictsp-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    /// Free-form provenance such as the training step.
    #[serde(default)]
    pub note: String,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model<T: Real>(model: &Model<T>, note: impl Into<String>) -> Self {
        let params = model
            .layout()
            .names
            .iter()
            .zip(model.params())
            .map(|(name, p)| NamedTensor {
                name: name.clone(),
                shape: p.shape().to_vec(),
                data: p.data().iter().map(|v| v.as_f64()).collect(),
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: model.config().clone(),
            note: note.into(),
            params,
        }
    }

    /// Rebuilds the model, rejecting unknown versions, missing or extra
    /// tensors and shape mismatches.
    pub fn into_model<T: Real>(self) -> Result<Model<T>> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("not a checkpoint (format `{}`)", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        self.config.validate()?;
        let layout = super::Layout::new(&self.config);
        if self.params.len() != layout.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, configuration needs {}",
                self.params.len(),
                layout.len()
            )));
        }
        let mut tensors = Vec::with_capacity(layout.len());
        for (i, (name, shape)) in layout.names.iter().zip(&layout.shapes).enumerate() {
            let nt = self
                .params
                .iter()
                .find(|p| &p.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if &nt.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} (#{i}): shape {:?} does not match expected {shape:?}",
                    nt.shape
                )));
            }
            let t = Tensor::new(nt.shape.clone(), nt.data.iter().map(|&v| T::lit(v)).collect())
                .map_err(|e| Error::Checkpoint(format!("parameter {name}: {e}")))?;
            tensors.push(t);
        }
        Model::from_params(self.config, tensors)
    }
}

pub fn save_checkpoint<T: Real>(model: &Model<T>, note: &str, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer(std::io::BufWriter::new(file), &Checkpoint::from_model(model, note))?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Model<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
    ckpt.into_model()
}
