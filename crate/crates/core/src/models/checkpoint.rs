//! Self-describing binary checkpoint.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "FPCKPT\0\0"
//! version  u32      1
//! arch     u32 length + UTF-8 JSON architecture descriptor
//! meta     u32 length + UTF-8 free text (resolved config, normalization)
//! count    u32      number of tensors
//! tensor*  u8 section (0 = parameter, 1 = buffer)
//!          u32 length + UTF-8 name
//!          u32 rank, then rank x u64 dims
//!          product(dims) x f64 values
//! ```

use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::models::{Arch, ModelParams};
use crate::nn::{Real, Tensor};

const MAGIC: &[u8; 8] = b"FPCKPT\0\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f64>,
    pub metadata: String,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

pub fn encode<T: Real>(params: &ModelParams<T>, metadata: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    put_str(&mut out, &params.arch.descriptor());
    put_str(&mut out, metadata);
    out.extend(((params.params.len() + params.buffers.len()) as u32).to_le_bytes());
    for (section, map) in [(0u8, &params.params), (1u8, &params.buffers)] {
        for (name, t) in map {
            out.push(section);
            put_str(&mut out, name);
            out.extend((t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend((d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend(v.as_f64().to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::format(self.path, "invalid UTF-8 string"))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let arch = Arch::from_descriptor(&r.string()?)?;
    let metadata = r.string()?;
    let count = r.u32()?;
    let mut params = IndexMap::new();
    let mut buffers = IndexMap::new();
    for _ in 0..count {
        let section = r.take(1)?[0];
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::format(path, "tensor too large"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format(path, e.to_string()))?;
        match section {
            0 => params.insert(name, t),
            1 => buffers.insert(name, t),
            s => return Err(Error::format(path, format!("unknown section {s}"))),
        };
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last tensor"));
    }
    Ok(Checkpoint {
        params: ModelParams {
            arch,
            params,
            buffers,
        },
        metadata,
    })
}

pub fn write<T: Real>(path: &Path, params: &ModelParams<T>, metadata: &str) -> Result<()> {
    std::fs::write(path, encode(params, metadata)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{BaselineConfig, BaselineKind, Model};

    #[test]
    fn roundtrip_is_exact() {
        let arch = Arch::Baseline(BaselineConfig {
            width: 64,
            ..BaselineConfig::new(BaselineKind::Cnn)
        });
        let p = Model::<f64>::build(&arch, 3).unwrap().params();
        let bytes = encode(&p, "seed = 3\n");
        let back = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.params, p);
        assert_eq!(back.metadata, "seed = 3\n");
        assert_eq!(encode(&back.params, &back.metadata), bytes);
    }

    #[test]
    fn corrupt_input_is_a_format_error() {
        let p = Path::new("mem");
        assert!(matches!(decode(b"nope", p), Err(Error::Format { .. })));
        let arch = Arch::Baseline(BaselineConfig {
            width: 64,
            ..BaselineConfig::new(BaselineKind::Mlp)
        });
        let bytes = encode(&Model::<f64>::build(&arch, 1).unwrap().params(), "");
        assert!(matches!(
            decode(&bytes[..bytes.len() - 3], p),
            Err(Error::Format { .. })
        ));
    }
}
