//! Portable parameter checkpoints.
//!
//! Layout, all integers little-endian `u32`, all reals little-endian `f32`:
//!
//! ```text
//! magic      4 bytes  "MMWT"
//! version    u32      currently 1
//! kind       u32 length + UTF-8 bytes   ("vqvae", "memmlp", ...)
//! meta       u32 length + UTF-8 bytes   (JSON describing the model config)
//! count      u32      number of records
//! record     repeated `count` times:
//!   id       u32 length + UTF-8 bytes
//!   ndim     u32
//!   dims     ndim x u32
//!   data     prod(dims) x f32, row-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::params::ParamStore;
use super::Real;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMWT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: String,
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn from_store<S: Real>(kind: &str, meta: String, store: &ParamStore<S>) -> Self {
        let records = store
            .iter()
            .map(|(_, p)| Record {
                id: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect();
        Checkpoint {
            kind: kind.to_string(),
            meta,
            records,
        }
    }

    /// Overwrites the values of `store` with the records, matching by id and
    /// shape. Every parameter must be present.
    pub fn load_into<S: Real>(&self, store: &mut ParamStore<S>) -> Result<()> {
        if self.records.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                self.records.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let rec = self
                .records
                .iter()
                .find(|r| r.id == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            let target = store.value_mut(id);
            if rec.shape != target.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    rec.shape,
                    target.shape()
                )));
            }
            let (r, c) = target.dim();
            *target = Array2::from_shape_vec((r, c), rec.data.iter().map(|&v| S::of(v as f64)).collect())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        put_str(&mut out, &self.meta);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            put_str(&mut out, &r.id);
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &d in &r.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut rd, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = get_u32(&mut rd)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let kind = get_str(&mut rd)?;
        let meta = get_str(&mut rd)?;
        let count = get_u32(&mut rd)? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let id = get_str(&mut rd)?;
            let ndim = get_u32(&mut rd)? as usize;
            let shape = (0..ndim)
                .map(|_| get_u32(&mut rd).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            if rd.len() < n * 4 {
                return Err(Error::Checkpoint(format!("truncated data for {id}")));
            }
            let data = rd[..n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            rd = &rd[n * 4..];
            records.push(Record { id, shape, data });
        }
        if !rd.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", rd.len())));
        }
        Ok(Checkpoint { kind, meta, records })
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn read_exact(rd: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    rd.read_exact(buf)
        .map_err(|_| Error::Checkpoint("unexpected end of checkpoint".into()))
}

fn get_u32(rd: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(rd, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_str(rd: &mut &[u8]) -> Result<String> {
    let n = get_u32(rd)? as usize;
    if rd.len() < n {
        return Err(Error::Checkpoint("truncated string".into()));
    }
    let s = std::str::from_utf8(&rd[..n])
        .map_err(|e| Error::Checkpoint(e.to_string()))?
        .to_string();
    *rd = &rd[n..];
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn byte_layout_is_stable() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", array![[1.0, -2.0]]);
        let bytes = Checkpoint::from_store("t", "{}".into(), &store).to_bytes();
        let mut expected = b"MMWT".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(b"t");
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(b"{}");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(b"w");
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn round_trip_and_corruption() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", array![[0.1, 0.2], [0.3, 0.4]]);
        store.add("b", array![[7.0]]);
        let ck = Checkpoint::from_store("memmlp", "{\"x\":1}".into(), &store);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(ck, back);
        let mut other = store.clone();
        other.value_mut(crate::diffcore::ParamId(0)).fill(0.0);
        back.load_into(&mut other).unwrap();
        assert!(other.same_values(&store));

        let mut bad = ck.to_bytes();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
        let truncated = &ck.to_bytes()[..20];
        assert!(Checkpoint::from_bytes(truncated).is_err());

        let mut wrong = ParamStore::<f32>::new();
        wrong.add("a", array![[0.0, 0.0]]);
        wrong.add("b", array![[0.0]]);
        assert!(ck.load_into(&mut wrong).is_err());
    }
}
