//! Flat parameter archive.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "UUCKPT01"
//! count      u32
//! count x record:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims (u64 each)
//!   payload  numel x f64
//! ```
//!
//! A plain-text manifest with one `name<TAB>shape<TAB>numel<TAB>frozen`
//! line per record is written next to it.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"UUCKPT01";

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + store.total_numel() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.tensor.ndim() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated archive".into()))?;
        let s = &self.bytes[self.pos..end];
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

/// Decodes an archive into ordered `(name, tensor)` records.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let count = cur.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("name is not UTF-8: {e}")))?
            .to_string();
        let ndim = cur.u32()? as usize;
        let shape = (0..ndim).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let payload = cur.take(numel * 8)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(out)
}

pub fn manifest(store: &ParamStore) -> String {
    let mut s = String::from("# name\tshape\tnumel\tfrozen\n");
    for (_, p) in store.iter() {
        let shape: Vec<String> = p.tensor.shape().iter().map(|d| d.to_string()).collect();
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            p.name,
            shape.join("x"),
            p.tensor.numel(),
            p.frozen
        ));
    }
    s
}

/// Writes `params.bin` and `manifest.txt` into `dir`.
pub fn save(store: &ParamStore, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::File::create(dir.join("params.bin"))?.write_all(&encode(store))?;
    fs::write(dir.join("manifest.txt"), manifest(store))?;
    Ok(())
}

pub fn read_records(dir: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    fs::File::open(dir.join("params.bin"))?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// Overwrites every parameter of `store` from `records`. The record set must
/// match the store exactly by name and shape.
pub fn load_into(store: &mut ParamStore, records: &[(String, Tensor)]) -> Result<()> {
    if records.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "archive has {} records, model expects {}",
            records.len(),
            store.len()
        )));
    }
    for (name, t) in records {
        store.set_value(name, t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("stage1.adapter.down.w", Tensor::new(&[2, 3], vec![1.5, -0.0, f64::MIN_POSITIVE, 3.0, 1e300, -7.25]).unwrap())
            .unwrap();
        s.add("neck.b", Tensor::scalar(0.1)).unwrap();
        s
    }

    #[test]
    fn manifest_lists_every_record() {
        let m = manifest(&sample_store());
        assert!(m.contains("stage1.adapter.down.w\t2x3\t6\tfalse"));
        assert_eq!(m.lines().count(), 3);
    }

    #[test]
    fn truncated_and_corrupt_archives_are_rejected() {
        let bytes = encode(&sample_store());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode(&long).is_err());
    }

    #[test]
    fn load_into_requires_exact_match() {
        let s = sample_store();
        let recs = decode(&encode(&s)).unwrap();
        let mut other = ParamStore::new();
        other.add("neck.b", Tensor::scalar(0.0)).unwrap();
        assert!(load_into(&mut other, &recs).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in prop::collection::vec(any::<f64>(), 1..40), split in 0usize..40) {
            let split = split.min(values.len());
            let mut s = ParamStore::new();
            s.add("a", Tensor::new(&[split], values[..split].to_vec()).unwrap()).unwrap();
            s.add("b.c", Tensor::new(&[values.len() - split, 1], values[split..].to_vec()).unwrap()).unwrap();
            let bytes = encode(&s);
            let recs = decode(&bytes).unwrap();
            let mut t = s.clone();
            for p in t.iter_mut() { p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0); }
            load_into(&mut t, &recs).unwrap();
            prop_assert_eq!(encode(&t), bytes);
            for ((_, a), (_, b)) in s.iter().zip(t.iter()) {
                let ab: Vec<u64> = a.tensor.data().iter().map(|v| v.to_bits()).collect();
                let bb: Vec<u64> = b.tensor.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(ab, bb);
            }
        }
    }
}
