//! `SPRM v1` model files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SPRM" | u32 version | u64 json_len | json header
//! repeated: u16 name_len | name | u8 rank | rank x u64 dims | f64 data (row-major)
//! ```
//!
//! The JSON header carries the model config plus the list of pruned sublayer
//! indices.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{InnerWeights, ModelConfig, Sublayer, SublayerKind, SublayerStack};
use crate::error::{Result, SprintError};
use crate::matrix::Matrix;

pub const SPRM_MAGIC: &[u8; 4] = b"SPRM";
pub const SPRM_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(flatten)]
    config: ModelConfig,
    pruned: Vec<usize>,
}

struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_matrix(out: &mut Vec<u8>, name: &str, m: &Matrix) {
    put_tensor(out, name, &[m.rows(), m.cols()], m.data());
}

/// Serializes a model into `SPRM v1` bytes.
pub fn write_model<W: Write>(model: &SublayerStack, mut w: W) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        pruned: model.pruned_indices(),
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(SPRM_MAGIC);
    out.extend_from_slice(&SPRM_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);

    put_matrix(&mut out, "embedding", &model.embedding);
    for layer in &model.sublayers {
        let p = format!("sublayers.{}", layer.index);
        match &layer.inner {
            InnerWeights::Mha { norm, wq, wk, wv } => {
                put_tensor(&mut out, &format!("{p}.norm"), &[norm.len()], norm);
                put_matrix(&mut out, &format!("{p}.wq"), wq);
                put_matrix(&mut out, &format!("{p}.wk"), wk);
                put_matrix(&mut out, &format!("{p}.wv"), wv);
                put_matrix(&mut out, &format!("{p}.wo"), &layer.out_proj);
            }
            InnerWeights::Mlp { norm, w_gate, w_up } => {
                put_tensor(&mut out, &format!("{p}.norm"), &[norm.len()], norm);
                put_matrix(&mut out, &format!("{p}.w_gate"), w_gate);
                put_matrix(&mut out, &format!("{p}.w_up"), w_up);
                put_matrix(&mut out, &format!("{p}.w_down"), &layer.out_proj);
            }
        }
    }
    put_tensor(&mut out, "final_norm", &[model.final_norm.len()], &model.final_norm);
    put_matrix(&mut out, "lm_head", &model.lm_head);
    w.write_all(&out)?;
    Ok(())
}

pub fn save_model(model: &SublayerStack, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = Vec::new();
    write_model(model, &mut bytes)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SublayerStack> {
    let bytes = fs::read(path)?;
    read_model(&bytes[..])
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(SprintError::Format("unexpected end of SPRM data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn take_tensor(tensors: &mut HashMap<String, Tensor>, name: &str, dims: &[usize]) -> Result<Vec<f64>> {
    let t = tensors
        .remove(name)
        .ok_or_else(|| SprintError::Format(format!("missing tensor {name}")))?;
    if t.dims != dims {
        return Err(SprintError::Format(format!("tensor {name} has dims {:?}, expected {dims:?}", t.dims)));
    }
    Ok(t.data)
}

pub fn read_model<R: Read>(mut r: R) -> Result<SublayerStack> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };

    if c.take(4)? != SPRM_MAGIC {
        return Err(SprintError::Format("missing SPRM magic".into()));
    }
    let version = c.u32()?;
    if version != SPRM_VERSION {
        return Err(SprintError::Format(format!("unsupported SPRM version {version}")));
    }
    let json_len = c.u64()? as usize;
    if json_len > c.remaining() {
        return Err(SprintError::Format("JSON header length exceeds file size".into()));
    }
    let header: Header = serde_json::from_slice(c.take(json_len)?)?;
    header.config.validate()?;

    let mut tensors: HashMap<String, Tensor> = HashMap::new();
    while c.remaining() > 0 {
        let name_len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| SprintError::Format("tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = c.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u64()? as usize);
        }
        let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let count = match count {
            Some(n) if n.checked_mul(8).is_some_and(|b| b <= c.remaining()) => n,
            _ => return Err(SprintError::Format(format!("tensor {name} overruns the file"))),
        };
        let raw = c.take(count * 8)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        if tensors.insert(name.clone(), Tensor { dims, data }).is_some() {
            return Err(SprintError::Format(format!("duplicate tensor {name}")));
        }
    }

    let cfg = header.config;
    let d = cfg.d_model;
    let mut take = |name: &str, dims: &[usize]| take_tensor(&mut tensors, name, dims);

    let embedding = Matrix::from_vec(cfg.vocab_size, d, take("embedding", &[cfg.vocab_size, d])?)?;
    let mut sublayers = Vec::with_capacity(cfg.n_sublayers());
    for index in 1..=cfg.n_sublayers() {
        let p = format!("sublayers.{index}");
        let norm = take(&format!("{p}.norm"), &[d])?;
        let mut mat = |suffix: &str, rows: usize, cols: usize| -> Result<Matrix> {
            Matrix::from_vec(rows, cols, take(&format!("{p}.{suffix}"), &[rows, cols])?)
        };
        let kind = SublayerKind::of_index(index);
        let (inner, out_proj) = match kind {
            SublayerKind::Mha => (
                InnerWeights::Mha { norm, wq: mat("wq", d, d)?, wk: mat("wk", d, d)?, wv: mat("wv", d, d)? },
                mat("wo", d, d)?,
            ),
            SublayerKind::Mlp => (
                InnerWeights::Mlp { norm, w_gate: mat("w_gate", cfg.d_ff, d)?, w_up: mat("w_up", cfg.d_ff, d)? },
                mat("w_down", d, cfg.d_ff)?,
            ),
        };
        sublayers.push(Sublayer { index, kind, pruned: header.pruned.contains(&index), inner, out_proj });
    }
    let final_norm = take("final_norm", &[d])?;
    let lm_head = Matrix::from_vec(d, cfg.vocab_size, take("lm_head", &[d, cfg.vocab_size])?)?;
    if let Some(extra) = tensors.keys().next() {
        return Err(SprintError::Format(format!("unexpected tensor {extra}")));
    }
    if let Some(&bad) = header.pruned.iter().find(|&&p| p == 0 || p > cfg.n_sublayers()) {
        return Err(SprintError::Format(format!("pruned index {bad} out of range")));
    }
    Ok(SublayerStack { config: cfg, embedding, sublayers, final_norm, lm_head })
}
