//! Binary checkpoint format.
//!
//! Layout (little-endian): magic `DRCK`, version `u32`, seven `u32` config
//! fields (depth, image_size, patch_size, channels, embed_dim, heads,
//! class_count), record count `u32`, then per record: name length `u32`,
//! UTF-8 name, rank `u32`, dims `u32 × rank`, raw `f64` values.

use std::io::{Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::params::BackboneParams;
use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DRCK";
pub const VERSION: u32 = 1;

pub fn encode(params: &BackboneParams) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let c = &params.config;
    for v in [
        c.depth,
        c.image_size,
        c.patch_size,
        c.channels,
        c.embed_dim,
        c.heads,
        c.class_count,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let named = params.named();
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated(self.buf.len()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<BackboneParams> {
    let mut cur = Cursor { buf, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format {
            what: "checkpoint",
            detail: "bad magic".into(),
        });
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Format {
            what: "checkpoint",
            detail: format!("unsupported version {version}"),
        });
    }
    let mut fields = [0usize; 7];
    for f in &mut fields {
        *f = cur.u32()? as usize;
    }
    let config = ModelConfig {
        depth: fields[0],
        image_size: fields[1],
        patch_size: fields[2],
        channels: fields[3],
        embed_dim: fields[4],
        heads: fields[5],
        class_count: fields[6],
    };
    config.validate()?;
    let count = cur.u32()? as usize;
    let mut records = std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|e| Error::Format {
                what: "checkpoint",
                detail: format!("record name: {e}"),
            })?
            .to_owned();
        let rank = cur.u32()? as usize;
        let shape = (0..rank)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
        records.insert(name, Tensor::new(shape, data)?);
    }
    if cur.pos != buf.len() {
        return Err(Error::Format {
            what: "checkpoint",
            detail: format!("{} trailing bytes", buf.len() - cur.pos),
        });
    }

    let mut params = BackboneParams::init(&config, 0)?;
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    if records.len() != names.len() {
        return Err(Error::Format {
            what: "checkpoint",
            detail: format!("{} records, expected {}", records.len(), names.len()),
        });
    }
    for (name, slot) in names.iter().zip(params.tensors_mut()) {
        let t = records.remove(name).ok_or_else(|| Error::Format {
            what: "checkpoint",
            detail: format!("missing record {name}"),
        })?;
        if t.shape() != slot.shape() {
            return Err(Error::shape(
                "checkpoint",
                format!("{name}: {:?} vs {:?}", t.shape(), slot.shape()),
            ));
        }
        *slot = t;
    }
    Ok(params)
}

pub fn save(params: &BackboneParams, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<BackboneParams> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}
