//! Checkpoint file format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "HFLABCKP"
//! version  u8       currently 1
//! spec     u32 len + UTF-8 key-value model description
//! digest   32 bytes sha256 of the spec text
//! params   u32 count, then per parameter:
//!          name (u16 len + UTF-8), rank u8, dims (u32 each), f32 data
//! opt      u8 flag; if 1: step u64, then per parameter m and v as f32
//! ```
//!
//! Values are stored as f32; loading widens back to f64.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::optim::AdamWState;
use super::params::ParamStore;
use super::NnError;

const MAGIC: &[u8; 8] = b"HFLABCKP";
const VERSION: u8 = 1;

pub struct CheckpointData {
    pub spec_text: String,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub optimizer: Option<OptimizerData>,
}

pub struct OptimizerData {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

pub fn save(
    path: &Path,
    spec_text: &str,
    store: &ParamStore,
    optimizer: Option<&AdamWState>,
) -> Result<(), NnError> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    let spec_bytes = spec_text.as_bytes();
    out.extend_from_slice(&(spec_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(spec_bytes);
    let digest = Sha256::digest(spec_bytes);
    out.extend_from_slice(&digest);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        let name = p.name().as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        let shape = p.tensor().shape();
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.tensor().data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    match optimizer {
        Some(state) => {
            out.push(1);
            out.extend_from_slice(&state.step.to_le_bytes());
            for buf in state.m.iter().chain(state.v.iter()) {
                for &v in buf {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        None => out.push(0),
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<CheckpointData, NnError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(NnError::CheckpointFormat("bad magic".into()));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(NnError::CheckpointFormat(format!(
            "unsupported version {version}"
        )));
    }
    let spec_len = r.u32()? as usize;
    let spec_text = String::from_utf8(r.take(spec_len)?.to_vec())
        .map_err(|_| NnError::CheckpointFormat("spec text is not UTF-8".into()))?;
    let digest = r.take(32)?;
    let expect = Sha256::digest(spec_text.as_bytes());
    if digest != expect.as_slice() {
        return Err(NnError::CheckpointFormat("spec digest mismatch".into()));
    }
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| NnError::CheckpointFormat("parameter name is not UTF-8".into()))?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.f32()? as f64);
        }
        params.push((name, shape, data));
    }
    let optimizer = if r.u8()? == 1 {
        let step = r.u64()?;
        let mut read_bufs = |params: &[(String, Vec<usize>, Vec<f64>)]| -> Result<Vec<Vec<f64>>, NnError> {
            let mut out = Vec::with_capacity(params.len());
            for (_, shape, _) in params {
                let len: usize = shape.iter().product();
                let mut buf = Vec::with_capacity(len);
                for _ in 0..len {
                    buf.push(r.f32()? as f64);
                }
                out.push(buf);
            }
            Ok(out)
        };
        let m = read_bufs(&params)?;
        let v = read_bufs(&params)?;
        Some(OptimizerData { step, m, v })
    } else {
        None
    };
    Ok(CheckpointData {
        spec_text,
        params,
        optimizer,
    })
}

/// Copy loaded values into a freshly built store, checking names and shapes.
pub fn apply(data: &CheckpointData, store: &mut ParamStore) -> Result<(), NnError> {
    if data.params.len() != store.len() {
        return Err(NnError::CheckpointFormat(format!(
            "checkpoint has {} parameters, model expects {}",
            data.params.len(),
            store.len()
        )));
    }
    for (idx, (name, shape, _)) in data.params.iter().enumerate() {
        let p = store.get(super::params::ParamId(idx));
        if p.name() != name || p.tensor().shape() != shape.as_slice() {
            return Err(NnError::CheckpointFormat(format!(
                "parameter {idx} mismatch: checkpoint `{name}` {shape:?}, model `{}` {:?}",
                p.name(),
                p.tensor().shape()
            )));
        }
    }
    let values: Vec<Vec<f64>> = data.params.iter().map(|(_, _, v)| v.clone()).collect();
    store.load_values(&values)
}

impl From<&OptimizerData> for AdamWState {
    fn from(d: &OptimizerData) -> Self {
        AdamWState {
            step: d.step,
            m: d.m.clone(),
            v: d.v.clone(),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.pos + n > self.bytes.len() {
            return Err(NnError::CheckpointFormat("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, NnError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, NnError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, NnError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
