//! Binary checkpoints.
//!
//! Layout (little-endian): magic `CLSRCKPT`, `u32` version, `u32` CRC-32 of the
//! payload, `u64` payload length, payload. The payload holds the config text,
//! the model step counter, the Adam step, the named-tensor table and the Adam
//! moments. Tensors are `(u16 name length, name, u8 dtype, u32 rows, u32 cols,
//! raw values)`; dtype 1 is f64, the only one written.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::optim::{Adam, AdamMoments};
use crate::compute::Tensor;
use crate::error::{ClsrError, Result};
use crate::model::Model;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CLSRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const HEADER_LEN: usize = 8 + 4 + 4 + 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    /// Optimizer steps the model has taken in total.
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
    pub adam_step: u64,
    pub moments: Vec<(String, AdamMoments)>,
}

impl Checkpoint {
    pub fn capture(model: &Model, config: &ExperimentConfig, optimizer: Option<&Adam>) -> Self {
        let tensors = model
            .store
            .iter()
            .map(|(_, p)| (p.name.clone(), (*p.value).clone()))
            .collect();
        let moments = optimizer
            .map(|adam| {
                model
                    .store
                    .iter()
                    .filter_map(|(id, p)| {
                        adam.moments
                            .get(id.index())
                            .and_then(Option::as_ref)
                            .map(|mo| (p.name.clone(), mo.clone()))
                    })
                    .collect()
            })
            .unwrap_or_default();
        Self {
            config_text: config.to_text(),
            step: model.training_steps,
            tensors,
            adam_step: optimizer.map_or(0, |a| a.step),
            moments,
        }
    }

    pub fn config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(&self.config_text)
    }

    /// Rebuilds the model; every stored tensor must match a parameter by name and shape.
    pub fn restore_model(&self) -> Result<Model> {
        let cfg = self.config()?;
        let mut model = Model::new(cfg.model, 0)?;
        if self.tensors.len() != model.store.len() {
            return Err(ClsrError::Config(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                model.store.len()
            )));
        }
        for (name, t) in &self.tensors {
            let id = model
                .store
                .find(name)
                .ok_or_else(|| ClsrError::Config(format!("checkpoint tensor '{name}' has no parameter")))?;
            model.store.assign(id, t.clone())?;
        }
        model.training_steps = self.step;
        Ok(model)
    }

    /// Adam state aligned to `model`'s parameter indices.
    pub fn restore_optimizer(&self, model: &Model) -> Result<Adam> {
        let cfg = self.config()?;
        let t = &cfg.train;
        let mut adam = Adam::new(t.learning_rate, t.adam_beta1, t.adam_beta2, t.adam_eps);
        adam.step = self.adam_step;
        adam.moments = vec![None; model.store.len()];
        for (name, mo) in &self.moments {
            let id = model
                .store
                .find(name)
                .ok_or_else(|| ClsrError::Config(format!("optimizer moment '{name}' has no parameter")))?;
            adam.moments[id.index()] = Some(mo.clone());
        }
        Ok(adam)
    }

    /// Hex SHA-256 over the named-tensor table.
    pub fn model_hash(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (name, t) in &self.tensors {
            write_tensor(&mut buf, name, t);
        }
        h.update(&buf);
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        write_u32(&mut payload, self.config_text.len() as u32);
        payload.extend_from_slice(self.config_text.as_bytes());
        payload.extend_from_slice(&self.step.to_le_bytes());
        payload.extend_from_slice(&self.adam_step.to_le_bytes());
        write_u32(&mut payload, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            write_tensor(&mut payload, name, t);
        }
        write_u32(&mut payload, self.moments.len() as u32);
        for (name, mo) in &self.moments {
            write_tensor(&mut payload, name, &mo.m);
            write_tensor(&mut payload, name, &mo.v);
        }
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        write_u32(&mut out, CHECKPOINT_VERSION);
        write_u32(&mut out, crc32fast::hash(&payload));
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out
    }

    /// Checks magic, then version, then checksum, then parses.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let integrity = |message: &str| ClsrError::Integrity {
            path: origin.to_path_buf(),
            message: message.to_string(),
        };
        if bytes.len() < HEADER_LEN || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(integrity("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(ClsrError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let crc = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        let len = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let payload = &bytes[HEADER_LEN..];
        if payload.len() as u64 != len {
            return Err(integrity("payload length mismatch"));
        }
        if crc32fast::hash(payload) != crc {
            return Err(integrity("checksum mismatch"));
        }
        let mut r = Reader { bytes: payload, pos: 0 };
        let parsed = (|| -> Option<Checkpoint> {
            let n = r.u32()? as usize;
            let config_text = String::from_utf8(r.take(n)?.to_vec()).ok()?;
            let step = r.u64()?;
            let adam_step = r.u64()?;
            let count = r.u32()?;
            let tensors = (0..count).map(|_| r.tensor()).collect::<Option<Vec<_>>>()?;
            let count = r.u32()?;
            let moments = (0..count)
                .map(|_| {
                    let (name, m) = r.tensor()?;
                    let (_, v) = r.tensor()?;
                    Some((name, AdamMoments { m, v }))
                })
                .collect::<Option<Vec<_>>>()?;
            (r.pos == payload.len()).then_some(Checkpoint {
                config_text,
                step,
                tensors,
                adam_step,
                moments,
            })
        })();
        parsed.ok_or_else(|| integrity("malformed payload"))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes()).map_err(|e| ClsrError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| ClsrError::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

fn write_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn write_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(DTYPE_F64);
    write_u32(buf, t.rows() as u32);
    write_u32(buf, t.cols() as u32);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn tensor(&mut self) -> Option<(String, Tensor)> {
        let n = u16::from_le_bytes(self.take(2)?.try_into().ok()?) as usize;
        let name = String::from_utf8(self.take(n)?.to_vec()).ok()?;
        if self.take(1)? != [DTYPE_F64] {
            return None;
        }
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let raw = self.take(rows.checked_mul(cols)?.checked_mul(8)?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Some((name, Tensor::from_vec(rows, cols, data).ok()?))
    }
}
