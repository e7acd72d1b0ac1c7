//! Model checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "DXCK" | u32 version = 1
//! u32 config length | UTF-8 "key=value\n" lines (model config, epoch, step)
//! u32 tensor count
//! per tensor: u32 name length | name | u32 rank | rank × u32 extents | f32 payload
//! ```
//!
//! Parameters come first in layout order. Adam moments, when present, follow
//! as `adam.m/<name>` and `adam.v/<name>`. There is no checksum: a flipped
//! payload byte loads fine and simply changes the model.

use std::collections::BTreeMap;
use std::path::Path;

use super::bytes::{put_f32s, put_u32, read_file, to_u32, write_file, Reader};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParameterSet};
use crate::tensor::Tensor;
use crate::training::OptimizerState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DXCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const MOMENT_M: &str = "adam.m/";
const MOMENT_V: &str = "adam.v/";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
    pub params: ParameterSet<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
}

impl Checkpoint {
    pub fn encode(&self, path: &Path) -> Result<Vec<u8>> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        put_u32(&mut out, CHECKPOINT_VERSION);
        let mut cfg = String::new();
        for (k, v) in self.config.to_pairs() {
            cfg.push_str(&format!("{k}={v}\n"));
        }
        cfg.push_str(&format!("epoch={}\nstep={}\n", self.epoch, self.step));
        put_u32(&mut out, to_u32(path, "config length", cfg.len())?);
        out.extend_from_slice(cfg.as_bytes());

        let mut tensors: Vec<(String, &Tensor<f32>)> = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t))
            .collect();
        if let Some(opt) = &self.optimizer {
            for (prefix, moments) in [(MOMENT_M, &opt.m), (MOMENT_V, &opt.v)] {
                for (name, t) in self.params.names().iter().zip(moments) {
                    tensors.push((format!("{prefix}{name}"), t));
                }
            }
        }
        put_u32(&mut out, to_u32(path, "tensor count", tensors.len())?);
        for (name, t) in tensors {
            put_u32(&mut out, to_u32(path, "name length", name.len())?);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, to_u32(path, "rank", t.rank())?);
            for &e in t.shape() {
                put_u32(&mut out, to_u32(path, "extent", e)?);
            }
            put_f32s(&mut out, t.data());
        }
        Ok(out)
    }

    pub fn decode(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(path, bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.format_error(4, format!("unsupported version {version}")));
        }
        let cfg_len = r.u32()? as usize;
        let cfg_at = r.pos();
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
            .map_err(|e| r.format_error(cfg_at + e.valid_up_to(), "config is not UTF-8"))?;
        let mut pairs = BTreeMap::new();
        for line in cfg_text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| r.format_error(cfg_at, format!("bad config line {line:?}")))?;
            pairs.insert(k.to_string(), v.to_string());
        }
        let counter = |pairs: &mut BTreeMap<String, String>, key: &str| -> Result<u64> {
            let raw = pairs
                .remove(key)
                .ok_or_else(|| Error::Checkpoint(format!("config block lacks {key}")))?;
            raw.parse()
                .map_err(|_| Error::Checkpoint(format!("invalid {key} {raw:?}")))
        };
        let epoch = counter(&mut pairs, "epoch")?;
        let step = counter(&mut pairs, "step")?;
        let config = ModelConfig::from_pairs(&pairs)
            .map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;

        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let at = r.pos();
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| r.format_error(at + 4, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank == 0 {
                return Err(r.format_error(at, format!("tensor {name} has rank 0")));
            }
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, e| a.checked_mul(*e))
                .ok_or_else(|| r.format_error(at, format!("tensor {name} is too large")))?;
            let data = r.f32s(numel)?;
            let t = Tensor::new(shape, data)
                .map_err(|e| r.format_error(at, format!("tensor {name}: {e}")))?;
            entries.push((name, t));
        }
        r.finish()?;

        let mut params = Vec::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, t) in entries {
            if let Some(n) = name.strip_prefix(MOMENT_M) {
                m.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix(MOMENT_V) {
                v.insert(n.to_string(), t);
            } else {
                params.push((name, t));
            }
        }
        let params = ParameterSet::from_parts(params)?;
        params.validate(&config)?;
        let optimizer = if m.is_empty() && v.is_empty() {
            None
        } else {
            let take = |map: &mut BTreeMap<String, Tensor<f32>>, prefix: &str| {
                params
                    .names()
                    .iter()
                    .map(|n| {
                        map.remove(n)
                            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {prefix}{n}")))
                    })
                    .collect::<Result<Vec<_>>>()
            };
            let state = OptimizerState {
                step,
                m: take(&mut m, MOMENT_M)?,
                v: take(&mut v, MOMENT_V)?,
            };
            if let Some(extra) = m.keys().next().or(v.keys().next()) {
                return Err(Error::Checkpoint(format!(
                    "moment for unknown tensor {extra}"
                )));
            }
            state.validate(&params)?;
            Some(state)
        };
        Ok(Self {
            config,
            epoch,
            step,
            params,
            optimizer,
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    write_file(path, &ckpt.encode(path)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    Checkpoint::decode(path, &read_file(path)?)
}
