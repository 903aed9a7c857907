//! Binary parameter container shared by every model in the crate.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "URIECKPT"
//! version    u32      1
//! fp_len     u32      fingerprint byte length
//! fp         bytes    UTF-8 configuration fingerprint
//! count      u32      number of entries
//! entry*:
//!   name_len u32, name bytes (UTF-8)
//!   flags    u8       bit 0 = trainable
//!   dims     4 × u32  (n, c, h, w)
//!   payload  n·c·h·w × f64
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 8] = b"URIECKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub trainable: bool,
    pub shape: Shape,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub fingerprint: String,
    pub entries: Vec<Entry>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn from_module<M: Module + ?Sized>(m: &M, fingerprint: impl Into<String>) -> Self {
        let entries = m
            .named_parameters()
            .into_iter()
            .map(|(name, t, trainable)| Entry {
                name,
                trainable,
                shape: t.shape(),
                data: t.data().to_vec(),
            })
            .collect();
        Self {
            version: FORMAT_VERSION,
            fingerprint: fingerprint.into(),
            entries,
        }
    }

    /// Copies every entry into the module's parameter with the same name.
    /// The module must have exactly the same names, order and shapes.
    pub fn apply_to<M: Module + ?Sized>(&self, m: &mut M, expected_fingerprint: &str) -> Result<()> {
        if self.fingerprint != expected_fingerprint {
            return Err(Error::Fingerprint {
                expected: expected_fingerprint.into(),
                found: self.fingerprint.clone(),
            });
        }
        let params = m.named_parameters_mut();
        if params.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "{} entries, model has {} parameters",
                self.entries.len(),
                params.len()
            )));
        }
        for ((name, t, _), e) in params.into_iter().zip(&self.entries) {
            if name != e.name || t.shape() != e.shape {
                return Err(Error::Checkpoint(format!(
                    "entry `{}` {} does not match parameter `{name}` {}",
                    e.name,
                    e.shape,
                    t.shape()
                )));
            }
            *t = Tensor::from_vec(e.shape, e.data.clone())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        put_str(&mut out, &self.fingerprint);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            put_str(&mut out, &e.name);
            out.push(u8::from(e.trainable));
            for d in e.shape.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let fingerprint = r.string()?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = r.string()?;
            let flags = r.take(1)?[0];
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = r.u32()? as usize;
            }
            let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
            let bytes = r.take(
                shape
                    .len()
                    .checked_mul(8)
                    .ok_or_else(|| Error::Checkpoint("entry too large".into()))?,
            )?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push(Entry {
                name,
                trainable: flags & 1 == 1,
                shape,
                data,
            });
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self {
            version,
            fingerprint,
            entries,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
