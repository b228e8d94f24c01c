//! Flat binary parameter files.
//!
//! Layout (little-endian): magic `VMBH`, `u32` version, `u32` record count,
//! then per record `u32` name length, UTF-8 name, `u32` rank, `u64` per
//! dimension, and `f64` values.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 4] = b"VMBH";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + store.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a VMBH checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32("record count")? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint(format!("record {i}: name is not UTF-8")))?
            .to_owned();
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u64("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("record `{name}`: shape overflows")))?;
        let raw = r.take(n.saturating_mul(8), &format!("data of `{name}`"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        records.push(Record { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(records)
}

/// Copies records into `store`, which must hold the same parameters in the
/// same order. The first differing record is named in the error.
pub fn apply(store: &ParamStore, records: &[Record]) -> Result<()> {
    for (i, ((name, t), rec)) in store.iter().zip(records).enumerate() {
        if name != rec.name {
            return Err(Error::Checkpoint(format!(
                "record {i}: expected parameter `{name}`, found `{}`",
                rec.name
            )));
        }
        if t.shape() != rec.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}`: shape {:?} in checkpoint, {:?} in model",
                rec.shape,
                t.shape()
            )));
        }
    }
    if store.len() != records.len() {
        let first = if store.len() > records.len() {
            format!(
                "missing parameter `{}`",
                store.iter().nth(records.len()).expect("index").0
            )
        } else {
            format!("unexpected parameter `{}`", records[store.len()].name)
        };
        return Err(Error::Checkpoint(format!(
            "{first} ({} records in checkpoint, {} in model)",
            records.len(),
            store.len()
        )));
    }
    for ((_, t), rec) in store.iter().zip(records) {
        t.set_data(rec.data.clone())?;
    }
    Ok(())
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, encode(store))?;
    Ok(())
}

pub fn load(store: &ParamStore, path: &Path) -> Result<()> {
    apply(store, &decode(&std::fs::read(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Builder, Init};
    use crate::rng::SeededRng;

    fn store(seed: u64, extra: bool) -> ParamStore {
        let mut s = ParamStore::new();
        let mut rng = SeededRng::new(seed);
        let mut b = Builder::new(&mut s, &mut rng);
        b.param("a.weight", &[2, 3], Init::Uniform(-1.0, 1.0));
        b.param("a.bias", &[3], Init::Uniform(-1.0, 1.0));
        if extra {
            b.param("b", &[], Init::Const(f64::MIN_POSITIVE));
        }
        s
    }

    #[test]
    fn round_trip_bitwise() {
        let src = store(1, true);
        let bytes = encode(&src);
        let dst = store(2, true);
        apply(&dst, &decode(&bytes).unwrap()).unwrap();
        assert_eq!(encode(&dst), bytes);
        assert_eq!(&bytes[..4], b"VMBH");
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = encode(&store(1, true));
        assert!(decode(&bytes[..bytes.len() - 1])
            .unwrap_err()
            .to_string()
            .contains("truncated"));
        bytes.push(0);
        assert!(decode(&bytes).unwrap_err().to_string().contains("trailing"));
        bytes[0] = b'X';
        assert!(decode(&bytes).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn mismatch_names_parameter() {
        let recs = decode(&encode(&store(1, true))).unwrap();
        let err = apply(&store(1, false), &recs).unwrap_err().to_string();
        assert!(err.contains("unexpected parameter `b`"), "{err}");
        let mut renamed = recs.clone();
        renamed[1].name = "a.gain".into();
        let err = apply(&store(1, true), &renamed).unwrap_err().to_string();
        assert!(err.contains("`a.bias`") && err.contains("`a.gain`"), "{err}");
        let mut reshaped = recs;
        reshaped[0].shape = vec![3, 2];
        let err = apply(&store(1, true), &reshaped).unwrap_err().to_string();
        assert!(err.contains("`a.weight`"), "{err}");
    }
}
