//! Binary parameter checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        4 bytes  "PLRK"
//! version      u32      1
//! config_hash  32 bytes
//! seed         u64
//! n_tensors    u32
//! n_tensors times:
//!   name_len   u32
//!   name       name_len bytes, UTF-8
//!   rank       u32
//!   dims       rank x u64
//!   data       prod(dims) x f64, row-major
//! ```
//!
//! Tensor names are prefixed `theta.` or `phi.`; one extra tensor named
//! `meta.model` carries the architecture and vocabulary sizes.

use std::io::{Read, Write};
use std::path::Path;

use super::model::{ModelConfig, ParamSet, PolicyParams};
use super::vocab::Vocab;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PLRK";
const VERSION: u32 = 1;
const META: &str = "meta.model";

/// Identity stamped into a checkpoint header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub config_hash: [u8; 32],
    pub seed: u64,
}

fn meta_tensor(p: &PolicyParams) -> Tensor {
    let c = &p.config;
    let vals = [
        c.layers,
        c.d_model,
        c.heads,
        c.d_ff,
        c.head_hidden,
        c.max_len,
        c.max_gen,
        p.vocab.dims,
        p.vocab.buckets,
    ];
    let mut data: Vec<f64> = vals.iter().map(|&v| v as f64).collect();
    data.push(c.init_std);
    Tensor::vector(data)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn to_bytes(params: &PolicyParams, header: &CheckpointHeader) -> Vec<u8> {
    let mut named: Vec<(String, &Tensor)> = Vec::new();
    let meta = meta_tensor(params);
    named.push((META.to_string(), &meta));
    for (n, t) in params.theta.iter() {
        named.push((format!("theta.{n}"), t));
    }
    for (n, t) in params.phi.iter() {
        named.push((format!("phi.{n}"), t));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&header.config_hash);
    out.extend_from_slice(&header.seed.to_le_bytes());
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<(PolicyParams, CheckpointHeader)> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let config_hash: [u8; 32] = c.take(32)?.try_into().unwrap();
    let seed = c.u64()?;
    let n = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| bad("tensor name is not UTF-8"))?
            .to_string();
        let rank = c.u32()? as usize;
        if rank > 8 {
            return Err(bad(format!("tensor {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&m| m.checked_mul(8).is_some_and(|b| b <= buf.len()))
            .ok_or_else(|| bad(format!("tensor {name} is too large")))?;
        let raw = c.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| bad(format!("tensor {name}: {e}")))?;
        tensors.push((name, t));
    }
    if c.pos != buf.len() {
        return Err(bad(format!("{} trailing bytes", buf.len() - c.pos)));
    }

    let mut iter = tensors.into_iter();
    let (meta_name, meta) = iter.next().ok_or_else(|| bad("no tensors"))?;
    if meta_name != META || meta.numel() != 10 {
        return Err(bad("missing model metadata"));
    }
    let m = meta.data();
    let u = |i: usize| m[i] as usize;
    let config = ModelConfig {
        layers: u(0),
        d_model: u(1),
        heads: u(2),
        d_ff: u(3),
        head_hidden: u(4),
        max_len: u(5),
        max_gen: u(6),
        init_std: m[9],
    };
    let vocab = Vocab::new(u(7), u(8))?;
    // shapes and names are checked against a fresh initialization
    let template = PolicyParams::init(config, vocab, 0)?;
    let mut theta = ParamSet::new();
    let mut phi = ParamSet::new();
    for (name, t) in iter {
        if let Some(n) = name.strip_prefix("theta.") {
            theta.push(n, t);
        } else if let Some(n) = name.strip_prefix("phi.") {
            phi.push(n, t);
        } else {
            return Err(bad(format!("unexpected tensor {name}")));
        }
    }
    for (got, want, which) in [(&theta, &template.theta, "theta"), (&phi, &template.phi, "phi")] {
        if got.names() != want.names() {
            return Err(bad(format!("{which} tensor names do not match the architecture")));
        }
        for ((n, a), (_, b)) in got.iter().zip(want.iter()) {
            if a.shape() != b.shape() {
                return Err(bad(format!("tensor {n} has shape {:?}, expected {:?}", a.shape(), b.shape())));
            }
        }
    }
    Ok((
        PolicyParams {
            config,
            vocab,
            theta,
            phi,
        },
        CheckpointHeader { config_hash, seed },
    ))
}

pub fn save(params: &PolicyParams, header: &CheckpointHeader, path: &Path) -> Result<()> {
    let bytes = to_bytes(params, header);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(PolicyParams, CheckpointHeader)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&buf).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
