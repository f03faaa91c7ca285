//! Binary checkpoint container:
//!
//! ```text
//! magic "UGFCKPT\0" | version u32 | config length u32 | config TOML
//! epoch u32 | best metric f64
//! parameter count u32, then per parameter:
//!     name length u32 | name | rank u32 | dims u32 * rank | values f32 * numel
//! velocity count u32, then velocities in the same layout
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{seeded_rng, NdArray, Real, SgdState};

use super::config::RunConfig;
use super::model::DetectorModel;

pub const MAGIC: &[u8; 8] = b"UGFCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Validation mAP_50:95 the checkpoint was selected by.
    pub best_metric: f64,
    pub params: Vec<(String, NdArray)>,
    pub velocity: Vec<(String, NdArray)>,
}

/// Rounds values to the stored 32-bit precision.
fn stored(a: &NdArray) -> NdArray {
    a.map(|v| v as f32 as Real)
}

impl Checkpoint {
    pub fn capture(model: &DetectorModel, state: &SgdState, config: &RunConfig, epoch: usize, best_metric: f64) -> Self {
        let named = model.named_parameters();
        let velocity = named
            .iter()
            .zip(&state.velocity)
            .map(|((n, _), v)| (n.clone(), stored(v)))
            .collect();
        Self {
            config: config.clone(),
            epoch,
            best_metric,
            params: named.into_iter().map(|(n, t)| (n, stored(&t.value()))).collect(),
            velocity,
        }
    }

    /// Rebuilds the model for the embedded config and loads every parameter.
    pub fn build_model(&self) -> Result<DetectorModel> {
        let model = DetectorModel::new(&self.config, &mut seeded_rng(0))?;
        let named = model.named_parameters();
        if named.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "model has {} parameters, checkpoint {}",
                named.len(),
                self.params.len()
            )));
        }
        for ((name, t), (stored_name, value)) in named.iter().zip(&self.params) {
            if name != stored_name || t.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} {:?} does not match stored {stored_name} {:?}",
                    t.shape(),
                    value.shape()
                )));
            }
            *t.value_mut()? = value.clone();
        }
        Ok(model)
    }

    pub fn optimizer_state(&self) -> SgdState {
        SgdState {
            velocity: self.velocity.iter().map(|(_, v)| v.clone()).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let config = self.config.to_toml();
        put_u32(&mut out, config.len());
        out.extend_from_slice(config.as_bytes());
        put_u32(&mut out, self.epoch);
        out.extend_from_slice(&self.best_metric.to_le_bytes());
        for blobs in [&self.params, &self.velocity] {
            put_u32(&mut out, blobs.len());
            for (name, value) in blobs {
                put_u32(&mut out, name.len());
                out.extend_from_slice(name.as_bytes());
                put_u32(&mut out, value.rank());
                for &d in value.shape() {
                    put_u32(&mut out, d);
                }
                for &v in value.data() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(r.error("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error(&format!("unsupported version {version}, expected {VERSION}")));
        }
        let config_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(config_len)?).map_err(|_| r.error("config is not UTF-8"))?;
        let config = RunConfig::from_toml(text, path)?;
        let epoch = r.u32()? as usize;
        let best_metric = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let params = r.blobs()?;
        let velocity = r.blobs()?;
        if r.pos != bytes.len() {
            return Err(r.error("trailing bytes"));
        }
        if velocity.len() != params.len() {
            return Err(r.error("velocity count differs from parameter count"));
        }
        Ok(Self {
            config,
            epoch,
            best_metric,
            params,
            velocity,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn error(&self, msg: &str) -> Error {
        Error::Checkpoint(format!("{}: {msg} (offset {})", self.path.display(), self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| self.error("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn blobs(&mut self) -> Result<Vec<(String, NdArray)>> {
        let count = self.u32()? as usize;
        let mut out = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = self.u32()? as usize;
            let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|_| self.error("name is not UTF-8"))?;
            let rank = self.u32()? as usize;
            let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| self.error("shape overflows"))?;
            let raw = self.take(numel.checked_mul(4).ok_or_else(|| self.error("shape overflows"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as Real)
                .collect();
            out.push((name, NdArray::new(shape, data)?));
        }
        Ok(out)
    }
}
