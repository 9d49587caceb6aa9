//! Binary checkpoint format.
//!
//! ```text
//! magic        b"SPDC"
//! version      u32 LE
//! config_len   u32 LE, then config_len bytes of UTF-8 `key = value` lines
//! tensors      u32 LE
//! manifest     per tensor: name_len u32, name bytes, ndim u32, ndim x u64 dims
//! blobs        per tensor, in manifest order: prod(dims) x f32 LE
//! ```

use std::path::Path;

use crate::error::{Error, Result};

use super::transformer::{expected_layout, ModelConfig, Tensor, TinyTransformer};

pub const MAGIC: &[u8; 4] = b"SPDC";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(model: &TinyTransformer) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let cfg = model.config().to_text();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for t in model.params() {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &dim in &t.shape {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
    }
    for t in model.params() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(Error::Truncated(format!(
                "needed {n} bytes for {what} at offset {}, {} left",
                self.at,
                self.buf.len() - self.at
            )));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<TinyTransformer> {
    let mut r = Reader { buf: bytes, at: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Malformed("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let cfg_len = r.u32("config length")? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len, "config")?)
        .map_err(|_| Error::Malformed("config is not UTF-8".into()))?;
    let config = ModelConfig::from_text(cfg_text)?;
    let layout = expected_layout(&config);

    let count = r.u32("tensor count")? as usize;
    if count != layout.len() {
        return Err(Error::ShapeMismatch(format!(
            "manifest lists {count} tensors, config implies {}",
            layout.len()
        )));
    }
    let mut manifest = Vec::with_capacity(count);
    for (name, shape) in &layout {
        let name_len = r.u32("tensor name length")? as usize;
        let found = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
            .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?;
        let ndim = r.u32("tensor rank")? as usize;
        let mut dims = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            dims.push(r.u64("tensor dim")? as usize);
        }
        if &found != name || &dims != shape {
            return Err(Error::ShapeMismatch(format!(
                "manifest entry {found} {dims:?}, config implies {name} {shape:?}"
            )));
        }
        manifest.push((found, dims));
    }
    let mut params = Vec::with_capacity(count);
    for (name, shape) in manifest {
        let len: usize = shape.iter().product();
        let raw = r.take(len * 4, &format!("tensor {name}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(Tensor { name, shape, data });
    }
    if r.at != bytes.len() {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after tensor data",
            bytes.len() - r.at
        )));
    }
    TinyTransformer::from_params(config, params)
}

pub fn save_checkpoint(model: &TinyTransformer, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TinyTransformer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
