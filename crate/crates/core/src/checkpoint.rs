//! Named-tensor checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MXCK" | u32 version | u32 config_len | config JSON
//! u32 tensor_count
//! per tensor: u32 name_len | name | u8 dtype | u8 ndim | u32 dims[ndim] | data
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Params};
use crate::scalar::{decode_elems, encode_elems, DType, Scalar};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MXCK";
const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn to_bytes<T: Scalar>(params: &Params<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let cfg = serde_json::to_vec(&params.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    put_u32(&mut out, cfg.len() as u32);
    out.extend_from_slice(&cfg);
    let named = params.named();
    put_u32(&mut out, named.len() as u32);
    for (name, t) in named {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.code());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            put_u32(&mut out, d as u32);
        }
        encode_elems(t.data(), &mut out);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(Error::Checkpoint(format!("truncated {what}")));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

/// Parses a checkpoint, converting stored elements to `T`.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Params<T>> {
    let mut r = Reader { buf: bytes, at: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let cfg_len = r.u32("config length")? as usize;
    let config: ModelConfig =
        serde_json::from_slice(r.take(cfg_len, "config")?).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let mut params = Params::<T>::init(&config, 0)?;
    let names: Vec<(String, Vec<usize>)> = params
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let count = r.u32("tensor count")? as usize;
    if count != names.len() {
        return Err(Error::Checkpoint(format!("expected {} tensors, found {count}", names.len())));
    }
    let mut loaded = Vec::with_capacity(count);
    for (want_name, want_shape) in &names {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?).map_err(|_| Error::Checkpoint("name is not utf-8".into()))?;
        if name != want_name {
            return Err(Error::Checkpoint(format!("expected tensor {want_name}, found {name}")));
        }
        let dtype = DType::from_code(r.u8("dtype")?).ok_or_else(|| Error::Checkpoint(format!("{name}: bad dtype")))?;
        let ndim = r.u8("ndim")? as usize;
        let shape = (0..ndim).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if &shape != want_shape {
            return Err(Error::Checkpoint(format!("{name}: shape {shape:?}, expected {want_shape:?}")));
        }
        let n: usize = shape.iter().product();
        let data = decode_elems::<T>(dtype, r.take(n * dtype.size(), name)?);
        loaded.push(Tensor::new(shape, data)?);
    }
    if r.at != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    for (slot, t) in params.tensors_mut().into_iter().zip(loaded) {
        *slot = t;
    }
    Ok(params)
}

pub fn save<T: Scalar>(params: &Params<T>, path: &Path) -> Result<()> {
    let bytes = to_bytes(params)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Params<T>> {
    from_bytes(&fs::read(path)?)
}
