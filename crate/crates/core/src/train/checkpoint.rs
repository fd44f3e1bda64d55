//! Binary checkpoint: `CLCKPT01`, a little-endian `u64` header length, a JSON
//! header, then raw little-endian `f32` payloads in directory order. Offsets
//! in the directory are relative to the first payload byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{param_specs, Model, ModelConfig, ParamKind, ParamStore};
use crate::optim::OptimState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CLCKPT01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        }
    }
}

/// Every random draw is a substream of the root seed keyed by epoch, so the
/// pair below fully restores the generator position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub phase: Phase,
    /// Completed epochs of `phase`.
    pub epoch: usize,
    pub model: Model,
    pub optimizer: Option<OptimState>,
    pub rng: RngState,
    /// Resolved run configuration at save time.
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn fingerprint(&self) -> String {
        self.model.config.fingerprint()
    }

    pub fn expect_fingerprint(&self, config: &ModelConfig) -> Result<()> {
        let (expected, found) = (config.fingerprint(), self.fingerprint());
        if expected != found {
            return Err(Error::Fingerprint { expected, found });
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    kind: Option<ParamKind>,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    fingerprint: String,
    phase: Phase,
    epoch: usize,
    model: ModelConfig,
    config: serde_json::Value,
    rng: RngState,
    tensors: Vec<TensorEntry>,
    optimizer: Option<Vec<TensorEntry>>,
}

fn push_tensor(
    payload: &mut Vec<u8>,
    name: &str,
    kind: Option<ParamKind>,
    t: &Tensor,
) -> TensorEntry {
    let entry = TensorEntry {
        name: name.to_string(),
        kind,
        shape: t.shape().to_vec(),
        offset: payload.len() as u64,
    };
    for v in t.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    entry
}

pub fn encode(c: &Checkpoint) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let tensors = c
        .model
        .params
        .iter()
        .map(|(name, p)| push_tensor(&mut payload, name, Some(p.kind), &p.value))
        .collect();
    let optimizer = c.optimizer.as_ref().map(|o| {
        o.velocity
            .iter()
            .map(|(name, v)| push_tensor(&mut payload, name, None, v))
            .collect()
    });
    let header = Header {
        version: FORMAT_VERSION,
        fingerprint: c.fingerprint(),
        phase: c.phase,
        epoch: c.epoch,
        model: c.model.config.clone(),
        config: c.config.clone(),
        rng: c.rng,
        tensors,
        optimizer,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn corrupt(offset: usize, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        offset: offset as u64,
        message: message.into(),
    }
}

fn read_tensor(bytes: &[u8], base: usize, e: &TensorEntry) -> Result<Tensor> {
    let n: usize = e.shape.iter().product();
    let start = usize::try_from(e.offset)
        .ok()
        .and_then(|o| o.checked_add(base))
        .ok_or_else(|| corrupt(base, format!("offset of {} overflows", e.name)))?;
    let end = start
        .checked_add(n * 4)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| {
            corrupt(
                bytes.len(),
                format!(
                    "payload of {} truncated (needs bytes {start}..{})",
                    e.name,
                    start + n * 4
                ),
            )
        })?;
    let data = bytes[start..end]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(&e.shape, data).map_err(|err| corrupt(start, format!("{}: {err}", e.name)))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(corrupt(0, "missing CLCKPT01 magic"));
    }
    if bytes.len() < 16 {
        return Err(corrupt(8, "truncated header length"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let base = 16usize
        .checked_add(len)
        .filter(|&b| b <= bytes.len())
        .ok_or_else(|| {
            corrupt(
                16,
                format!("header of {len} bytes exceeds file size {}", bytes.len()),
            )
        })?;
    let header: Header = serde_json::from_slice(&bytes[16..base]).map_err(|e| {
        corrupt(
            16 + e.column().saturating_sub(1),
            format!("header JSON: {e}"),
        )
    })?;
    if header.version != FORMAT_VERSION {
        return Err(corrupt(
            16,
            format!("unsupported format version {}", header.version),
        ));
    }
    let computed = header.model.fingerprint();
    if computed != header.fingerprint {
        return Err(Error::Fingerprint {
            expected: computed,
            found: header.fingerprint,
        });
    }
    header.model.validate()?;

    let expected: BTreeMap<String, (ParamKind, Vec<usize>)> = param_specs(&header.model)
        .into_iter()
        .map(|(n, k, s)| (n, (k, s)))
        .collect();
    let mut params = ParamStore::new();
    for e in &header.tensors {
        let Some((kind, shape)) = expected.get(&e.name) else {
            return Err(corrupt(16, format!("unknown tensor {}", e.name)));
        };
        if *shape != e.shape || e.kind != Some(*kind) {
            return Err(corrupt(
                16,
                format!(
                    "tensor {} has shape {:?}, architecture needs {shape:?}",
                    e.name, e.shape
                ),
            ));
        }
        params.insert(e.name.clone(), *kind, read_tensor(bytes, base, e)?);
    }
    if params.len() != expected.len() {
        let missing: Vec<&String> = expected.keys().filter(|k| params.get(k).is_err()).collect();
        return Err(corrupt(16, format!("missing tensors {missing:?}")));
    }
    let optimizer = match &header.optimizer {
        None => None,
        Some(entries) => {
            let mut velocity = BTreeMap::new();
            for e in entries {
                velocity.insert(e.name.clone(), read_tensor(bytes, base, e)?);
            }
            Some(OptimState { velocity })
        }
    };
    Ok(Checkpoint {
        phase: header.phase,
        epoch: header.epoch,
        model: Model {
            config: header.model,
            params,
        },
        optimizer,
        rng: header.rng,
        config: header.config,
    })
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode(c)?).map_err(|e| Error::file(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint { offset, message } => Error::Checkpoint {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}
