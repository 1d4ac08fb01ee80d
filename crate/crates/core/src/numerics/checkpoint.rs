//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "FMW1" | count | { name_len | name (UTF-8) | rank | dims[rank] | f64 LE values } * count
//! ```

use std::fs;
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FMW1";

pub fn encode_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.tensor.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                "checkpoint",
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(
            "checkpoint",
            0,
            "bad magic, expected \"FMW1\"",
        ));
    }
    let count = cur.u32("parameter count")?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_at = cur.pos;
        let len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| Error::format("checkpoint", name_at as u64, "name is not UTF-8"))?
            .to_owned();
        let rank = cur.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        if rank == 0 || n == 0 {
            return Err(Error::format(
                "checkpoint",
                name_at as u64,
                format!("parameter `{name}` has degenerate shape {shape:?}"),
            ));
        }
        let raw = cur.take(n * 8, "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(
            "checkpoint",
            cur.pos as u64,
            "trailing bytes",
        ));
    }
    Ok(out)
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(store)).map_err(|e| Error::from(e).at_path(path))
}

/// Read a checkpoint file and load it into `store` (names and shapes must match).
pub fn load_checkpoint(store: &mut ParamStore, path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::from(e).at_path(path))?;
    let values = decode_checkpoint(&bytes).map_err(|e| e.at_path(path))?;
    store.load_values(values).map_err(|e| e.at_path(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.add(
            "det/conv1/weight",
            Tensor::new(vec![1, 2], vec![0.1, -3.5e-300]).unwrap(),
            true,
        )
        .unwrap();
        s.add(
            "det/conv1/bias",
            Tensor::new(vec![1], vec![f64::MIN_POSITIVE]).unwrap(),
            false,
        )
        .unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample();
        let bytes = encode_checkpoint(&s);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        for ((name, t), p) in back.iter().zip(s.iter()) {
            assert_eq!(name, &p.name);
            assert_eq!(t.shape(), p.tensor.shape());
            let a: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = p.tensor.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        assert_eq!(encode_checkpoint(&s), bytes);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bytes = encode_checkpoint(&sample());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_checkpoint(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        bytes.truncate(bytes.len() - 3);
        let err = decode_checkpoint(&bytes).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }
}
