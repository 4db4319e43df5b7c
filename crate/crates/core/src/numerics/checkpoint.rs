//! Flat binary checkpoint format.
//!
//! ```text
//! "LVCK" | version: u32
//! repeated until EOF:
//!   name_len: u32 | name: utf-8 bytes | rank: u32 | dims: rank x u32 | payload: f64 x prod(dims)
//! ```
//! All integers and floats are little-endian. The same layout stores
//! parameters and raw token grids.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::param::Parameter;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LVCK";
pub const VERSION: u32 = 1;

/// Serializes named tensors in the given order.
pub fn encode<'a>(records: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in records {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!("truncated record at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses a buffer produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("parameter name is not utf-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * 8)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_params<'a>(path: &Path, params: impl IntoIterator<Item = &'a Parameter>) -> Result<()> {
    let bytes = encode(params.into_iter().map(|p| (p.name.as_str(), &p.value)));
    write_atomic(path, &bytes)
}

pub fn load_params(path: &Path) -> Result<Vec<Parameter>> {
    let bytes = fs::read(path)?;
    Ok(decode(&bytes)?
        .into_iter()
        .map(|(name, value)| Parameter::new(name, value))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let bytes = encode([("ab", &t)]);
        let mut expect = b"LVCK".to_vec();
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(b"ab");
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1.0f64.to_le_bytes());
        expect.extend_from_slice(&(-2.5f64).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::zeros(&[3]);
        let bytes = encode([("x", &t)]);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut bad_version = bytes;
        bad_version[4] = 9;
        assert!(decode(&bad_version).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let ps = vec![
            Parameter::new("a.w", Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5)),
            Parameter::new("b", Tensor::scalar(7.0)),
        ];
        save_params(&path, &ps).unwrap();
        let back = load_params(&path).unwrap();
        assert_eq!(back, ps);
        assert!(!path.with_extension("tmp").exists());
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(
            dims in prop::collection::vec(1usize..4, 1..4),
            seed in any::<u64>(),
            name in "[a-z.]{1,12}",
        ) {
            let t = Tensor::from_fn(&dims, |i| ((seed ^ i as u64) as f64).sin() * 1e3);
            let back = decode(&encode([(name.as_str(), &t)])).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(&back[0].0, &name);
            prop_assert_eq!(&back[0].1, &t);
        }
    }
}
