//! Versioned JSON checkpoint envelope.
//!
//! ```text
//! {"format_version":1,"sha256":"<hex of body text>","body":{...}}
//! ```
//!
//! Parameter and moment arrays are base64 little-endian `f64`. The digest
//! covers the exact body text, so any edit to the body fails to load.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::adam::AdamState;
use super::net::{ArchSpec, VectorFieldParams};
use super::tensor::Tensor;
use super::AutodiffError;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error("checkpoint digest mismatch: recorded {recorded}, computed {computed}")]
    Integrity { recorded: String, computed: String },
    #[error(transparent)]
    Architecture(#[from] AutodiffError),
}

impl From<serde_json::Error> for CheckpointError {
    fn from(e: serde_json::Error) -> Self {
        CheckpointError::Format(e.to_string())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EncodedTensor {
    name: String,
    shape: Vec<usize>,
    data: String,
}

fn encode(name: &str, t: &Tensor) -> EncodedTensor {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    EncodedTensor { name: name.to_string(), shape: t.shape().to_vec(), data: B64.encode(bytes) }
}

fn decode(e: &EncodedTensor) -> Result<Tensor, CheckpointError> {
    let bytes = B64
        .decode(&e.data)
        .map_err(|err| CheckpointError::Format(format!("`{}`: {err}", e.name)))?;
    if bytes.len() % 8 != 0 {
        return Err(CheckpointError::Format(format!("`{}`: truncated array", e.name)));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Tensor::new(e.shape.clone(), data)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EncodedAdam {
    step: u64,
    beta1: f64,
    beta2: f64,
    lr: f64,
    eps: f64,
    m: Vec<EncodedTensor>,
    v: Vec<EncodedTensor>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EncodedNet {
    params: Vec<EncodedTensor>,
    optimizer: Option<EncodedAdam>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Body {
    architecture: ArchSpec,
    step: u64,
    flow: EncodedNet,
    denoiser: EncodedNet,
    train_config: serde_json::Value,
}

#[derive(Deserialize)]
struct EnvelopeIn<'a> {
    format_version: u32,
    sha256: String,
    #[serde(borrow)]
    body: &'a RawValue,
}

/// Both networks plus optimizer state and the config that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub flow: VectorFieldParams,
    pub denoiser: VectorFieldParams,
    pub flow_opt: Option<AdamState>,
    pub denoiser_opt: Option<AdamState>,
    pub step: u64,
    pub train_config: serde_json::Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn encode_net(p: &VectorFieldParams, opt: &Option<AdamState>) -> EncodedNet {
    EncodedNet {
        params: p.names().iter().zip(p.tensors()).map(|(n, t)| encode(n, t)).collect(),
        optimizer: opt.as_ref().map(|s| EncodedAdam {
            step: s.step,
            beta1: s.beta1,
            beta2: s.beta2,
            lr: s.lr,
            eps: s.eps,
            m: p.names().iter().zip(&s.m).map(|(n, t)| encode(n, t)).collect(),
            v: p.names().iter().zip(&s.v).map(|(n, t)| encode(n, t)).collect(),
        }),
    }
}

fn decode_net(arch: ArchSpec, e: &EncodedNet) -> Result<(VectorFieldParams, Option<AdamState>), CheckpointError> {
    let named = e
        .params
        .iter()
        .map(|t| Ok((t.name.clone(), decode(t)?)))
        .collect::<Result<Vec<_>, CheckpointError>>()?;
    let params = VectorFieldParams::from_named(arch, named)?;
    let opt = match &e.optimizer {
        None => None,
        Some(o) => {
            let m = o.m.iter().map(decode).collect::<Result<Vec<_>, _>>()?;
            let v = o.v.iter().map(decode).collect::<Result<Vec<_>, _>>()?;
            let shapes_ok = m.len() == params.tensors().len()
                && v.len() == m.len()
                && params.tensors().iter().zip(&m).zip(&v).all(|((p, a), b)| p.shape() == a.shape() && p.shape() == b.shape());
            if !shapes_ok {
                return Err(CheckpointError::Format("optimizer moments do not match parameters".into()));
            }
            Some(AdamState { m, v, step: o.step, beta1: o.beta1, beta2: o.beta2, lr: o.lr, eps: o.eps })
        }
    };
    Ok((params, opt))
}

impl Checkpoint {
    pub fn arch(&self) -> &ArchSpec {
        self.flow.arch()
    }

    pub fn to_json(&self) -> Result<String, CheckpointError> {
        if self.flow.arch() != self.denoiser.arch() {
            return Err(CheckpointError::Format("flow and denoiser architectures differ".into()));
        }
        let body = Body {
            architecture: *self.flow.arch(),
            step: self.step,
            flow: encode_net(&self.flow, &self.flow_opt),
            denoiser: encode_net(&self.denoiser, &self.denoiser_opt),
            train_config: self.train_config.clone(),
        };
        let body_text = serde_json::to_string(&body)?;
        Ok(format!(
            "{{\"format_version\":{},\"sha256\":\"{}\",\"body\":{}}}\n",
            CHECKPOINT_FORMAT_VERSION,
            sha256_hex(body_text.as_bytes()),
            body_text
        ))
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let env: EnvelopeIn<'_> = serde_json::from_str(text)?;
        if env.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(CheckpointError::Version(env.format_version));
        }
        let computed = sha256_hex(env.body.get().as_bytes());
        if computed != env.sha256 {
            return Err(CheckpointError::Integrity { recorded: env.sha256, computed });
        }
        let body: Body = serde_json::from_str(env.body.get())?;
        let (flow, flow_opt) = decode_net(body.architecture, &body.flow)?;
        let (denoiser, denoiser_opt) = decode_net(body.architecture, &body.denoiser)?;
        Ok(Self { flow, denoiser, flow_opt, denoiser_opt, step: body.step, train_config: body.train_config })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
