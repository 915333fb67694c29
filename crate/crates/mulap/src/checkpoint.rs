//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   "MULAP1"
//! u32     config JSON length, then that many bytes of JSON
//! u32     parameter count
//! per parameter:
//!   u16   name length, then the UTF-8 name
//!   u8    dtype tag (0 = f64)
//!   u8    rank, then rank x u64 dims
//!   data  row-major f64 values
//! u8      optimizer-state flag
//! if 1:
//!   u64   step count
//!   u32   slot count
//!   per slot: u16 name length + name, u64 element count, m values, v values
//! ```
//!
//! Saving a loaded checkpoint reproduces it byte for byte: parameters are
//! written in registry order and optimizer slots in name order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::model::{ModelConfig, MulapModel};
use crate::optim::{Adam, AdamSlot};
use crate::tensor::TensorError;

pub const MAGIC: &[u8; 6] = b"MULAP1";
const DTYPE_F64: u8 = 0;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn format_err(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Format(msg.into())
}

/// Everything a checkpoint holds, decoded.
pub struct Checkpoint {
    pub config: ModelConfig,
    /// `(name, shape, values)` in the order written.
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub optimizer: Option<OptimizerState>,
}

pub struct OptimizerState {
    pub t: u64,
    pub slots: BTreeMap<String, AdamSlot>,
}

impl Checkpoint {
    /// Snapshot a model (and optionally its optimizer) into checkpoint
    /// form.
    pub fn from_model(model: &MulapModel, optimizer: Option<&Adam>) -> Checkpoint {
        let params = model
            .params()
            .iter()
            .map(|(n, p)| (n.clone(), p.shape().to_vec(), p.data_vec()))
            .collect();
        let optimizer = optimizer.map(|opt| {
            let (t, state) = opt.export_state();
            OptimizerState { t, slots: state.clone() }
        });
        Checkpoint { config: model.cfg.clone(), params, optimizer }
    }

    /// Rebuild the model this checkpoint describes. Fails if the stored
    /// parameter set does not exactly match the registry for its config.
    pub fn build_model(&self) -> Result<MulapModel, CheckpointError> {
        self.config
            .validate()
            .map_err(|e| format_err(format!("stored config is invalid: {e}")))?;
        let model = MulapModel::new(&self.config, 0);
        model.load_params(&self.params)?;
        Ok(model)
    }

    pub fn encode(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let cfg = serde_json::to_string(&self.config)
            .map_err(|e| format_err(format!("encode config: {e}")))?;
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, shape, data) in &self.params {
            write_name(&mut out, name)?;
            out.push(DTYPE_F64);
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let expect: usize = shape.iter().product();
            if expect != data.len() {
                return Err(format_err(format!(
                    "{name}: shape {shape:?} holds {expect} values, buffer has {}",
                    data.len()
                )));
            }
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        match &self.optimizer {
            None => out.push(0),
            Some(state) => {
                out.push(1);
                out.extend_from_slice(&state.t.to_le_bytes());
                out.extend_from_slice(&(state.slots.len() as u32).to_le_bytes());
                for (name, slot) in &state.slots {
                    write_name(&mut out, name)?;
                    if slot.m.len() != slot.v.len() {
                        return Err(format_err(format!("{name}: mismatched moment buffers")));
                    }
                    out.extend_from_slice(&(slot.m.len() as u64).to_le_bytes());
                    for &v in &slot.m {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                    for &v in &slot.v {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(MAGIC.len())?;
        if magic != MAGIC {
            return Err(format_err("bad magic; not a checkpoint file"));
        }
        let cfg_len = r.u32()? as usize;
        let cfg_bytes = r.take(cfg_len)?;
        let config: ModelConfig = serde_json::from_slice(cfg_bytes)
            .map_err(|e| format_err(format!("config echo: {e}")))?;
        let n_params = r.u32()? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name = r.name()?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F64 {
                return Err(format_err(format!("{name}: unsupported dtype tag {dtype}")));
            }
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            params.push((name, shape, r.f64s(n)?));
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let t = r.u64()?;
                let n_slots = r.u32()? as usize;
                let mut slots = BTreeMap::new();
                for _ in 0..n_slots {
                    let name = r.name()?;
                    let n = r.u64()? as usize;
                    let m = r.f64s(n)?;
                    let v = r.f64s(n)?;
                    slots.insert(name, AdamSlot { m, v });
                }
                Some(OptimizerState { t, slots })
            }
            other => return Err(format_err(format!("optimizer flag {other} is not 0 or 1"))),
        };
        if r.pos != bytes.len() {
            return Err(format_err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config, params, optimizer })
    }
}

fn write_name(out: &mut Vec<u8>, name: &str) -> Result<(), CheckpointError> {
    if name.len() > u16::MAX as usize {
        return Err(format_err(format!("name too long: {name}")));
    }
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(format_err(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String, CheckpointError> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|e| format_err(format!("name is not UTF-8: {e}")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Write a model snapshot to disk.
pub fn save(
    path: &Path,
    model: &MulapModel,
    optimizer: Option<&Adam>,
) -> Result<(), CheckpointError> {
    let bytes = Checkpoint::from_model(model, optimizer).encode()?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Read a checkpoint from disk.
pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::decode(&fs::read(path)?)
}

// ─────────────────────────────── Tests ─────────────────────────────────
