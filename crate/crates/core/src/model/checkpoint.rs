//! Binary model container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! u8   version
//! u32  config length, then that many bytes of JSON (the model structure)
//! u64  seed
//! u32  parameter count
//! per parameter:
//!   u32 name length, name bytes (UTF-8)
//!   u32 ndim, then ndim × u64 extents
//!   product(extents) × f32 values
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{Model, ModelSpec};
use crate::error::{Error, Result};
use crate::numerics::{Real, Rng, Tensor};

pub const CHECKPOINT_VERSION: u8 = 1;

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub seed: u64,
    pub params: Vec<(String, Tensor<f32>)>,
}

fn err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn save_checkpoint<T: Real>(path: &Path, model: &Model<T>, seed: u64) -> Result<()> {
    let mut buf = Vec::new();
    buf.push(CHECKPOINT_VERSION);
    let json = serde_json::to_vec(&model.spec()).map_err(|e| err(e.to_string()))?;
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&seed.to_le_bytes());
    let params = model.named_params();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let shape = p.value.shape();
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len()).ok_or_else(|| err("truncated file"))?;
        let s = &self.data[self.pos..end];
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

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut c = Cursor { data: &bytes, pos: 0 };
    let version = c.take(1)?[0];
    if version != CHECKPOINT_VERSION {
        return Err(err(format!("unsupported version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let len = c.u32()? as usize;
    let spec: ModelSpec = serde_json::from_slice(c.take(len)?).map_err(|e| err(format!("bad config: {e}")))?;
    let seed = c.u64()?;
    let count = c.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let n = c.u32()? as usize;
        let name = String::from_utf8(c.take(n)?.to_vec()).map_err(|_| err("parameter name is not UTF-8"))?;
        let ndim = c.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = c.take(numel.checked_mul(4).ok_or_else(|| err("tensor too large"))?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        params.push((name, Tensor::new(&shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(err("trailing bytes after last parameter"));
    }
    Ok(Checkpoint { spec, seed, params })
}

/// Rebuilds the model and fills every parameter by name.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(Model<T>, u64)> {
    let ck = read_checkpoint(path)?;
    let mut model = Model::<T>::from_spec(&ck.spec, &mut Rng::new(ck.seed, "init"))?;
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    if names.len() != ck.params.len() {
        return Err(err(format!(
            "model has {} parameters, file has {}",
            names.len(),
            ck.params.len()
        )));
    }
    let mut params = model.params_mut();
    for ((name, p), (file_name, value)) in names.iter().zip(params.iter_mut()).zip(&ck.params) {
        if name != file_name {
            return Err(err(format!("expected parameter {name}, found {file_name}")));
        }
        if p.value.shape() != value.shape() {
            return Err(Error::dimension("load_checkpoint", p.value.shape(), value.shape()));
        }
        p.value = value.cast();
    }
    drop(params);
    Ok((model, ck.seed))
}
