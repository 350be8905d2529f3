//! Checkpoint files: one line of JSON header followed by little-endian f32
//! payload (parameters, then Adam first and second moments when present).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::mlp::{MlpArchitecture, ModelParams};
use super::{MamlConfig, MamlError, Result};
use crate::io::write_atomic;

pub const CHECKPOINT_FORMAT: &str = "melemad-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdamHeader {
    step: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    architecture: MlpArchitecture,
    config: MamlConfig,
    seed: u64,
    iteration: u64,
    n_params: usize,
    adam: Option<AdamHeader>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub config: MamlConfig,
    pub iteration: u64,
    pub adam: Option<AdamState>,
}

fn push_f32(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

fn read_f32(bytes: &[u8], count: usize) -> Result<(Vec<f64>, &[u8])> {
    if bytes.len() < count * 4 {
        return Err(MamlError::Checkpoint(format!("payload holds {} bytes, need {}", bytes.len(), count * 4)));
    }
    let (head, rest) = bytes.split_at(count * 4);
    let vals = head
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4-byte chunk"))))
        .collect();
    Ok((vals, rest))
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = Header {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            architecture: self.params.architecture.clone(),
            config: self.config.clone(),
            seed: self.config.seed,
            iteration: self.iteration,
            n_params: self.params.len(),
            adam: self.adam.as_ref().map(|a| AdamHeader {
                step: a.step,
                beta1: a.beta1,
                beta2: a.beta2,
                epsilon: a.epsilon,
            }),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        push_f32(&mut out, &self.params.values);
        if let Some(a) = &self.adam {
            push_f32(&mut out, &a.m);
            push_f32(&mut out, &a.v);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| MamlError::Checkpoint("missing header line".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..nl])?;
        if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
            return Err(MamlError::Checkpoint(format!("unsupported format {} v{}", header.format, header.version)));
        }
        if header.n_params != header.architecture.param_count() {
            return Err(MamlError::Checkpoint("parameter count does not match architecture".into()));
        }
        let (values, rest) = read_f32(&bytes[nl + 1..], header.n_params)?;
        let params = ModelParams::new(header.architecture, values)?;
        let adam = match header.adam {
            None => None,
            Some(h) => {
                let (m, rest) = read_f32(rest, header.n_params)?;
                let (v, _) = read_f32(rest, header.n_params)?;
                Some(AdamState { m, v, step: h.step, beta1: h.beta1, beta2: h.beta2, epsilon: h.epsilon })
            }
        };
        Ok(Self { params, config: header.config, iteration: header.iteration, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}
