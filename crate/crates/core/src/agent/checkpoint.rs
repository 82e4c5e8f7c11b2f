use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::PolicyParams;
use super::ppo::Adam;
use super::{AgentConfig, Policy};
use crate::error::{Error, Result};
use crate::io;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Versioned JSON snapshot of a policy, its optimizer and the training position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub layers: usize,
    pub hidden: usize,
    pub clb_scale: f64,
    pub init_seed: u64,
    pub tensors: Vec<TensorRecord>,
    /// Training episodes consumed so far.
    pub step: u64,
    /// Episode RNG streams are derived from `(rng_seed, episode index)`, so this
    /// pair is the full sampling state.
    pub rng_seed: u64,
    pub adam: Option<Adam>,
}

impl Checkpoint {
    pub fn capture(policy: &Policy, adam: Option<&Adam>, step: u64, rng_seed: u64) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            layers: policy.config.layers,
            hidden: policy.config.hidden,
            clb_scale: policy.config.clb_scale,
            init_seed: policy.config.seed,
            tensors: policy
                .params
                .named_tensors()
                .into_iter()
                .map(|(name, shape, data)| TensorRecord {
                    name,
                    shape,
                    data: data.to_vec(),
                })
                .collect(),
            step,
            rng_seed,
            adam: adam.cloned(),
        }
    }

    pub fn restore(&self) -> Result<Policy> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Validation(format!("unsupported checkpoint version {}", self.version)));
        }
        let config = AgentConfig {
            layers: self.layers,
            hidden: self.hidden,
            clb_scale: self.clb_scale,
            seed: self.init_seed,
        };
        let mut policy = Policy::new(config)?;
        let expected: Vec<(String, Vec<usize>)> = policy
            .params
            .named_tensors()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        if expected.len() != self.tensors.len() {
            return Err(Error::Validation(format!(
                "checkpoint has {} tensors, architecture needs {}",
                self.tensors.len(),
                expected.len()
            )));
        }
        let targets: Vec<&mut Vec<f64>> = PolicyParams::tensors_mut(&mut policy.params);
        for ((dst, rec), (name, shape)) in targets.into_iter().zip(&self.tensors).zip(expected) {
            if rec.name != name || rec.shape != shape || rec.data.len() != dst.len() {
                return Err(Error::Validation(format!(
                    "tensor {} {:?} does not match expected {name} {shape:?}",
                    rec.name, rec.shape
                )));
            }
            dst.copy_from_slice(&rec.data);
        }
        Ok(policy)
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    io::write_atomic(path, serde_json::to_string(ckpt)?.as_bytes())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Ok(serde_json::from_str(&io::read_to_string(path)?)?)
}
