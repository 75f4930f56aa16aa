//! Binary checkpoint: model weights, optimizer moments and run position.
//!
//! ```text
//! "XLNG" | u32 version=1
//! u32 × 7 model config: vocab_size d_model n_heads n_layers d_ff max_seq_len dropout(f32 bits)
//! u32 tensor count
//! per tensor: u32 name_len | name (UTF-8) | u32 rank | u64 dims… | u8 dtype | payload
//! ```
//!
//! Everything is little-endian. Dtype 0 is f32; dtype 1 is u64 and only
//! appears on the `meta.*` entries (step counter and sampler state).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"XLNG";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_U64: u8 = 1;

const OPT_M: &str = "optim.m.";
const OPT_V: &str = "optim.v.";
const META_STEP: &str = "meta.step";
const META_SAMPLER: &str = "meta.sampler";

/// Optimizer moments saved alongside the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn from_adamw(opt: &AdamW<f32>) -> Self {
        OptimizerState {
            m: opt.m.clone(),
            v: opt.v.clone(),
            step: opt.step,
        }
    }

    pub fn into_adamw(self, config: AdamWConfig, params: &ModelParams<f32>) -> Result<AdamW<f32>> {
        AdamW::new(config, params).with_state(self.m, self.v, self.step)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub optimizer: Option<OptimizerState>,
    /// Training steps completed.
    pub step: u64,
    /// Batch sampler position: `[seed, examples_consumed]`.
    pub sampler: [u64; 2],
}

impl Checkpoint {
    pub fn new(params: ModelParams<f32>) -> Self {
        Checkpoint {
            params,
            optimizer: None,
            step: 0,
            sampler: [0, 0],
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let c = &self.params.config;
        for v in [c.vocab_size, c.d_model, c.n_heads, c.n_layers, c.d_ff, c.max_seq_len] {
            put_u32(&mut out, v as u32);
        }
        put_u32(&mut out, c.dropout_rate.to_bits());

        let named = self.params.named();
        let n_opt = if self.optimizer.is_some() { 2 * named.len() } else { 0 };
        put_u32(&mut out, (named.len() + n_opt + 2) as u32);
        for (name, t) in &named {
            put_f32_tensor(&mut out, name, t.shape(), t.data());
        }
        if let Some(opt) = &self.optimizer {
            for (prefix, moments) in [(OPT_M, &opt.m), (OPT_V, &opt.v)] {
                for ((name, t), data) in named.iter().zip(moments) {
                    put_f32_tensor(&mut out, &format!("{prefix}{name}"), t.shape(), data);
                }
            }
        }
        let opt_step = self.optimizer.as_ref().map_or(0, |o| o.step);
        put_u64_tensor(&mut out, META_STEP, &[self.step, opt_step]);
        put_u64_tensor(&mut out, META_SAMPLER, &self.sampler);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: format!("bad magic {magic:?}, expected \"XLNG\""),
            });
        }
        let at = r.pos;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.err_at(at, format!("unsupported version {version}")));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.u32("model config")? as usize;
        }
        let dropout_rate = f32::from_bits(r.u32("model config")?);
        let config = ModelConfig {
            vocab_size: dims[0],
            d_model: dims[1],
            n_heads: dims[2],
            n_layers: dims[3],
            d_ff: dims[4],
            max_seq_len: dims[5],
            dropout_rate,
        };
        let at = r.pos;
        config
            .validate()
            .map_err(|e| r.err_at(at, format!("invalid model config: {e}")))?;
        let count = r.u32("tensor count")? as usize;

        let mut weights = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        let mut meta_step = None;
        let mut sampler = None;
        for _ in 0..count {
            let start = r.pos;
            let entry = r.entry()?;
            match entry {
                Entry::F32(name, t) if name.starts_with(OPT_M) => m.push((name[OPT_M.len()..].to_owned(), t)),
                Entry::F32(name, t) if name.starts_with(OPT_V) => v.push((name[OPT_V.len()..].to_owned(), t)),
                Entry::F32(name, t) => weights.push((name, t)),
                Entry::U64(name, vals) if name == META_STEP && vals.len() == 2 => {
                    meta_step = Some((vals[0], vals[1]))
                }
                Entry::U64(name, vals) if name == META_SAMPLER && vals.len() == 2 => {
                    sampler = Some([vals[0], vals[1]])
                }
                Entry::U64(name, _) => {
                    return Err(r.err_at(start, format!("unexpected u64 entry {name:?}")))
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(r.err_at(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let (step, opt_step) = meta_step.ok_or_else(|| r.err_at(r.pos, "missing meta.step".into()))?;
        let sampler = sampler.ok_or_else(|| r.err_at(r.pos, "missing meta.sampler".into()))?;
        let params = ModelParams::from_named(config, weights)
            .map_err(|e| r.err_at(r.pos, format!("weights do not match config: {e}")))?;
        let optimizer = if m.is_empty() && v.is_empty() {
            None
        } else {
            let order = |mut table: Vec<(String, Tensor<f32>)>| -> Result<Vec<Vec<f32>>> {
                params
                    .names()
                    .iter()
                    .map(|n| {
                        let i = table
                            .iter()
                            .position(|(k, _)| k == n)
                            .ok_or_else(|| r.err_at(r.pos, format!("missing optimizer moment for {n}")))?;
                        Ok(table.swap_remove(i).1.into_data())
                    })
                    .collect()
            };
            Some(OptimizerState {
                m: order(m)?,
                v: order(v)?,
                step: opt_step,
            })
        };
        Ok(Checkpoint {
            params,
            optimizer,
            step,
            sampler,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_header(out: &mut Vec<u8>, name: &str, shape: &[usize], dtype: u8) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len() as u32);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.push(dtype);
}

fn put_f32_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    put_header(out, name, shape, DTYPE_F32);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_u64_tensor(out: &mut Vec<u8>, name: &str, data: &[u64]) {
    put_header(out, name, &[data.len()], DTYPE_U64);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

enum Entry {
    F32(String, Tensor<f32>),
    U64(String, Vec<u64>),
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err_at(&self, offset: usize, msg: String) -> Error {
        Error::Format {
            offset: offset as u64,
            msg,
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err_at(
                self.pos,
                format!(
                    "truncated reading {what}: need {n} bytes, {} left",
                    self.buf.len() - self.pos
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn entry(&mut self) -> Result<Entry> {
        let at = self.pos;
        let len = self.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(self.take(len, "tensor name")?)
            .map_err(|_| self.err_at(at + 4, "tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = self.u32("tensor rank")? as usize;
        if rank > 8 {
            return Err(self.err_at(self.pos - 4, format!("tensor {name}: rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64("tensor dims")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| self.err_at(at, format!("tensor {name}: dims overflow")))?;
        let dtype_at = self.pos;
        let dtype = self.take(1, "dtype")?[0];
        let width = match dtype {
            DTYPE_F32 => 4,
            DTYPE_U64 => 8,
            other => return Err(self.err_at(dtype_at, format!("tensor {name}: unknown dtype {other}"))),
        };
        let bytes_needed = numel
            .checked_mul(width)
            .ok_or_else(|| self.err_at(at, format!("tensor {name}: size overflow")))?;
        let payload = self.take(bytes_needed, &format!("payload of {name}"))?;
        Ok(match dtype {
            DTYPE_F32 => {
                let data = payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Entry::F32(name, Tensor::new(shape, data).expect("numel matches"))
            }
            _ => Entry::U64(
                name,
                payload
                    .chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        })
    }
}
