//! Versioned binary checkpoint container.
//!
//! ```text
//! b"PPCK" | u32 version | u8 ontology | u64 step | [u8; 32] config hash
//! u32 len | model config (JSON)
//! u32 n_tensors | n x ( u32 len | name | u32 rows | u32 cols | rows*cols x f64 )
//! u32 n_blobs   | n x ( u32 len | name | u64 len | bytes )
//! ```
//!
//! All integers and floats little-endian. Tensors are written in the
//! canonical [`Model::tensors`] order, so a round trip is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use crate::env::ontology::OntologyVersion;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

use super::{Model, ModelConfig};

pub const MAGIC: &[u8; 4] = b"PPCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub ontology: OntologyVersion,
    pub step: u64,
    pub config_hash: [u8; 32],
    pub model: Model,
    /// Opaque extra state such as optimizer moments.
    pub blobs: BTreeMap<String, Vec<u8>>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("non-UTF-8 name in checkpoint".into()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.ontology.as_u8());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        let cfg = serde_json::to_string(&self.model.config).expect("model config serializes");
        put_str(&mut out, &cfg);
        let tensors = self.model.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, m) in tensors {
            put_str(&mut out, &name);
            out.extend_from_slice(&(m.rows as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols as u32).to_le_bytes());
            for v in &m.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for (name, data) in &self.blobs {
            put_str(&mut out, name);
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            out.extend_from_slice(data);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let ontology = OntologyVersion::from_u8(r.u8()?)
            .ok_or_else(|| Error::Format("unknown ontology version".into()))?;
        let step = r.u64()?;
        let config_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let config: ModelConfig = serde_json::from_str(&r.string()?)
            .map_err(|e| Error::Format(format!("model config: {e}")))?;
        let mut model = Model::init(config, 0);
        let n = r.u32()? as usize;
        let mut loaded: BTreeMap<String, Matrix> = BTreeMap::new();
        for _ in 0..n {
            let name = r.string()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let bytes = r.take(rows * cols * 8)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            loaded.insert(name, Matrix::from_vec(rows, cols, data)?);
        }
        for (name, slot) in model.tensors_mut() {
            let m = loaded
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
            if (m.rows, m.cols) != (slot.rows, slot.cols) {
                return Err(Error::Format(format!(
                    "tensor {name}: stored {}x{}, expected {}x{}",
                    m.rows, m.cols, slot.rows, slot.cols
                )));
            }
            *slot = m;
        }
        if let Some(extra) = loaded.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {extra}")));
        }
        let mut blobs = BTreeMap::new();
        let nb = r.u32()? as usize;
        for _ in 0..nb {
            let name = r.string()?;
            let len = r.u64()? as usize;
            blobs.insert(name, r.take(len)?.to_vec());
        }
        if r.pos != buf.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            ontology,
            step,
            config_hash,
            model,
            blobs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Conditioning;

    fn sample() -> Checkpoint {
        let mut cfg = ModelConfig::new(20, 12, Conditioning::Film);
        cfg.hidden = [16, 16, 8];
        let mut blobs = BTreeMap::new();
        blobs.insert("adam".to_string(), vec![1, 2, 3]);
        Checkpoint {
            ontology: OntologyVersion::V1,
            step: 42,
            config_hash: [7; 32],
            model: Model::init(cfg, 3),
            blobs,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"PPCK");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut v2 = bytes;
        v2[4] = 9;
        assert!(Checkpoint::from_bytes(&v2).is_err());
    }
}
