//! Binary checkpoint format shared by the score network and the heatmap
//! extractor.
//!
//! Layout, all integers little-endian:
//!   magic "NFSD" | u32 format version | u32 json length | json header |
//!   per array: u32 name length | name | u32 rank | u32 dims[rank] |
//!   f32 payload (dims product values).
//!
//! The header carries a model-specific JSON blob plus optional optimizer
//! metadata; optimizer moment arrays are stored alongside the parameters
//! under "opt.m.<name>" / "opt.v.<name>". Parameters are kept on the f32
//! lattice in memory, so save -> load round trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::nn::{Param, ParamSet};
use crate::score::{OptimKind, OptimizerState};

pub const MAGIC: &[u8; 4] = b"NFSD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub kind: OptimKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    model: Value,
    optimizer: Option<OptimizerMeta>,
}

/// Everything read back from a checkpoint file.
pub struct Loaded {
    pub model: Value,
    pub arrays: Vec<Param>,
    pub optimizer: Option<OptimizerMeta>,
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_array(w: &mut impl Write, name: &str, dims: &[usize], data: &[f64]) -> Result<()> {
    write_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    write_u32(w, dims.len() as u32)?;
    for &d in dims {
        write_u32(w, d as u32)?;
    }
    let mut buf = Vec::with_capacity(data.len() * 4);
    for &v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Writes a checkpoint: model JSON, parameters, optional optimizer moments.
pub fn save(
    path: &Path,
    model: &Value,
    params: &ParamSet,
    optimizer: Option<&OptimizerState>,
) -> Result<()> {
    let header = Header {
        model: model.clone(),
        optimizer: optimizer.map(|o| OptimizerMeta {
            kind: o.kind,
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            step: o.step,
        }),
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, FORMAT_VERSION)?;
    write_u32(&mut w, json.len() as u32)?;
    w.write_all(&json)?;
    for p in params.iter() {
        write_array(&mut w, &p.name, &p.dims, &p.data)?;
    }
    if let Some(opt) = optimizer {
        if opt.kind == OptimKind::Adam {
            for (p, m) in params.iter().zip(opt.m.iter()) {
                write_array(&mut w, &format!("opt.m.{}", p.name), &p.dims, m)?;
            }
            for (p, v) in params.iter().zip(opt.v.iter()) {
                write_array(&mut w, &format!("opt.v.{}", p.name), &p.dims, v)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "unexpected end of file at byte {} (wanted {} more)",
                self.pos, n
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Reads a checkpoint file written by [`save`].
pub fn load(path: &Path) -> Result<Loaded> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };

    if c.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let json_len = c.u32()? as usize;
    let header: Header = serde_json::from_slice(c.take(json_len)?)?;

    let mut arrays = Vec::new();
    while !c.done() {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-utf8 array name".into()))?;
        let rank = c.u32()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!(
                "array '{name}' has implausible rank {rank}"
            )));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u32()? as usize);
        }
        let count: usize = dims.iter().product();
        let raw = c.take(count * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        arrays.push(Param { name, dims, data });
    }

    Ok(Loaded {
        model: header.model,
        arrays,
        optimizer: header.optimizer,
    })
}

/// Splits loaded arrays into (model params, adam m, adam v) by name prefix
/// and installs them into a freshly built parameter set, verifying shapes.
pub fn install_arrays(
    loaded: &Loaded,
    params: &mut ParamSet,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut m = vec![Vec::new(); params.len()];
    let mut v = vec![Vec::new(); params.len()];
    let mut seen = vec![false; params.len()];
    for arr in &loaded.arrays {
        let (target_name, slot) = if let Some(rest) = arr.name.strip_prefix("opt.m.") {
            (rest, 1u8)
        } else if let Some(rest) = arr.name.strip_prefix("opt.v.") {
            (rest, 2u8)
        } else {
            (arr.name.as_str(), 0u8)
        };
        let idx = params.index_of(target_name).ok_or_else(|| {
            Error::Checkpoint(format!("unknown array '{}' for this config", arr.name))
        })?;
        let expect = &params.get(idx).dims;
        if &arr.dims != expect {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for '{}': file has {:?}, config wants {:?}",
                arr.name, arr.dims, expect
            )));
        }
        match slot {
            0 => {
                params.get_mut(idx).data = arr.data.clone();
                seen[idx] = true;
            }
            1 => m[idx] = arr.data.clone(),
            _ => v[idx] = arr.data.clone(),
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Checkpoint(format!(
            "missing parameter '{}' in checkpoint",
            params.get(missing).name
        )));
    }
    Ok((m, v))
}

/// Reconstructs optimizer state from loaded metadata and moment arrays.
pub fn rebuild_optimizer(
    meta: &OptimizerMeta,
    params: &ParamSet,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
) -> OptimizerState {
    let (m, v) = match meta.kind {
        OptimKind::Adam => (m, v),
        OptimKind::Sgd => (
            params.iter().map(|_| Vec::new()).collect(),
            params.iter().map(|_| Vec::new()).collect(),
        ),
    };
    OptimizerState {
        kind: meta.kind,
        lr: meta.lr,
        beta1: meta.beta1,
        beta2: meta.beta2,
        eps: meta.eps,
        step: meta.step,
        m,
        v,
    }
}
