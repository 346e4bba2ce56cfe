use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{KeModel, ModeFlags, ModelConfig, ModelShape};
use crate::error::{Error, Result};
use crate::numeric::{read_tensors, write_tensors};

/// JSON sidecar describing a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub flags: ModeFlags,
    pub shape: ModelShape,
    pub seed: u64,
    pub parameters: Vec<(String, [usize; 2])>,
}

pub fn save_checkpoint(model: &KeModel, tensors_path: &Path, meta_path: &Path) -> Result<()> {
    let named: Vec<_> = model
        .names()
        .iter()
        .cloned()
        .zip(model.params().iter().cloned())
        .collect();
    write_tensors(tensors_path, &named)?;
    let meta = CheckpointMeta {
        config: model.config().clone(),
        flags: model.flags(),
        shape: model.shape(),
        seed: model.seed(),
        parameters: named.iter().map(|(n, t)| (n.clone(), t.shape())).collect(),
    };
    fs::write(meta_path, serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn load_checkpoint(tensors_path: &Path, meta_path: &Path) -> Result<KeModel> {
    let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(meta_path)?)?;
    let mut model = KeModel::new(meta.config, meta.flags, meta.shape, meta.seed)?;
    let named = read_tensors(tensors_path)?;
    if named.len() != model.names().len()
        || named.iter().zip(model.names()).any(|((n, _), m)| n != m)
    {
        return Err(Error::Schema(format!(
            "{} does not hold the parameters its sidecar describes",
            tensors_path.display()
        )));
    }
    model.set_params(named.into_iter().map(|(_, t)| t).collect())?;
    Ok(model)
}
