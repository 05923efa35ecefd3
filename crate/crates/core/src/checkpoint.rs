//! Checkpoints: one feature-container file per parameter tensor plus a JSON index.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::format;
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: &str = "pfmg-checkpoint/1";
pub const INDEX_FILE: &str = "index.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: PathBuf,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub version: String,
    pub config: ModelConfig,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    pub tensors: Vec<TensorEntry>,
}

/// Writes every tensor, then the index, so a readable index implies complete data.
pub fn save(dir: &Path, params: &ModelParams, config: &ModelConfig, epoch: Option<usize>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    for (name, tensor) in params.names().into_iter().zip(params.to_vec()) {
        let file = PathBuf::from(format!("{name}.avf"));
        format::write_file(&dir.join(&file), &[tensor])?;
        tensors.push(TensorEntry {
            name,
            file,
            shape: tensor.shape().to_vec(),
        });
    }
    let index = CheckpointIndex {
        version: CHECKPOINT_VERSION.into(),
        config: *config,
        seed: params.seed,
        epoch,
        tensors,
    };
    let path = dir.join(INDEX_FILE);
    let json = serde_json::to_string_pretty(&index).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_index(dir: &Path) -> Result<CheckpointIndex> {
    let path = dir.join(INDEX_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: CheckpointIndex =
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.clone(),
            source,
        })?;
    if index.version != CHECKPOINT_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported checkpoint version {:?}", index.version),
        ));
    }
    Ok(index)
}

pub fn load(dir: &Path) -> Result<(ModelParams, ModelConfig)> {
    let index = read_index(dir)?;
    let config = index.config;
    let mut params = ModelParams::init(&config, index.seed)?;
    let names = params.names();
    if names.len() != index.tensors.len() {
        return Err(Error::Consistency(format!(
            "checkpoint lists {} tensors, model has {}",
            index.tensors.len(),
            names.len()
        )));
    }
    let mut loaded: Vec<Tensor<f32>> = Vec::with_capacity(names.len());
    for (name, entry) in names.iter().zip(&index.tensors) {
        if &entry.name != name {
            return Err(Error::Consistency(format!(
                "checkpoint tensor {:?} where {name:?} was expected",
                entry.name
            )));
        }
        let path = dir.join(&entry.file);
        let mut blocks = format::read_file(&path)?;
        if blocks.len() != 1 {
            return Err(Error::format(
                &path,
                format!("expected 1 tensor block, found {}", blocks.len()),
            ));
        }
        let tensor = blocks.remove(0);
        if tensor.shape() != entry.shape.as_slice() {
            return Err(Error::Consistency(format!(
                "{name}: index says {:?}, file holds {:?}",
                entry.shape,
                tensor.shape()
            )));
        }
        loaded.push(tensor);
    }
    let mut it = loaded.into_iter();
    params.for_each_mut(|_, slot| *slot = it.next().expect("counted above"));
    params.check_layout(&config)?;
    Ok((params, config))
}
