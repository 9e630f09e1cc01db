//! Versioned checkpoint container: config snapshot plus named f32 tensors
//! for parameters and optimizer state. Reloading reproduces the training
//! trajectory exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::graph::{read_container, write_container, FormatError};
use crate::model::{GiconParams, ModelConfig};
use crate::tensor::Tensor;

use super::{OptState, TrainConfig, TrainError, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GICON-CP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    step: usize,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    /// Channel schema of the training dataset, for transfer compatibility
    /// checks.
    channel_names: Vec<String>,
    adam_t: u64,
    tensors: Vec<TensorMeta>,
}

/// A loaded checkpoint: training state plus the dataset channel schema it
/// was trained against.
#[derive(Debug)]
pub struct CheckpointData {
    pub state: TrainState<f32>,
    pub channel_names: Vec<String>,
}

pub fn save_checkpoint(
    state: &TrainState<f32>,
    channel_names: &[String],
    path: &Path,
) -> Result<(), TrainError> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    let mut push = |name: String, t: &Tensor<f32>, payload: &mut Vec<f32>| {
        tensors.push(TensorMeta {
            name,
            shape: t.shape().to_vec(),
            offset: payload.len(),
            len: t.len(),
        });
        payload.extend_from_slice(t.data());
    };
    for (name, t, _) in state.params.visit() {
        push(format!("param.{name}"), t, &mut payload);
    }
    for (name, t) in &state.opt.momentum {
        push(format!("opt.momentum.{name}"), t, &mut payload);
    }
    for (name, t) in &state.opt.adam_m {
        push(format!("opt.adam_m.{name}"), t, &mut payload);
    }
    for (name, t) in &state.opt.adam_v {
        push(format!("opt.adam_v.{name}"), t, &mut payload);
    }
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        step: state.step,
        model_cfg: state.model_cfg.clone(),
        train_cfg: state.train_cfg.clone(),
        channel_names: channel_names.to_vec(),
        adam_t: state.opt.adam_t,
        tensors,
    };
    write_container(
        path,
        CHECKPOINT_MAGIC,
        &serde_json::to_string(&header).map_err(FormatError::Header)?,
        &payload,
    )?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointData, TrainError> {
    let (json, payload) = read_container(path, CHECKPOINT_MAGIC)?;
    let header: CheckpointHeader = serde_json::from_str(&json).map_err(FormatError::Header)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(TrainError::Format(FormatError::UnsupportedVersion {
            found: header.version,
            supported: CHECKPOINT_VERSION,
        }));
    }
    let mut params_named = Vec::new();
    let mut opt = OptState::<f32>::new();
    opt.adam_t = header.adam_t;
    for meta in &header.tensors {
        let end = meta.offset + meta.len;
        if end > payload.len() {
            return Err(TrainError::Format(FormatError::Truncated(format!(
                "tensor {} extends to {end}, payload has {} values",
                meta.name,
                payload.len()
            ))));
        }
        let t = Tensor::from_vec(meta.shape.clone(), payload[meta.offset..end].to_vec())
            .map_err(|e| TrainError::Config(format!("tensor {}: {e}", meta.name)))?;
        if let Some(name) = meta.name.strip_prefix("param.") {
            params_named.push((name.to_string(), t));
        } else if let Some(name) = meta.name.strip_prefix("opt.momentum.") {
            opt.momentum.insert(name.to_string(), t);
        } else if let Some(name) = meta.name.strip_prefix("opt.adam_m.") {
            opt.adam_m.insert(name.to_string(), t);
        } else if let Some(name) = meta.name.strip_prefix("opt.adam_v.") {
            opt.adam_v.insert(name.to_string(), t);
        } else {
            return Err(TrainError::Config(format!(
                "unknown tensor kind {}",
                meta.name
            )));
        }
    }
    let mut params = GiconParams::<f32>::init(&header.model_cfg, 0)?;
    params.load_named(&params_named)?;
    Ok(CheckpointData {
        state: TrainState {
            params,
            opt,
            step: header.step,
            model_cfg: header.model_cfg,
            train_cfg: header.train_cfg,
        },
        channel_names: header.channel_names,
    })
}
