//! "DGFT v1" tensor files: magic `DGFT`, u32 version, u32 rank, rank x u64
//! dims, then the row-major f64 payload. Every integer and float is
//! little-endian.

use std::fs;
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DGFT";
pub const VERSION: u32 = 1;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * t.rank() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4).ok_or_else(|| bad("truncated header"))? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = cur.u32().ok_or_else(|| bad("truncated header"))?;
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let rank = cur.u32().ok_or_else(|| bad("truncated header"))? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = cur.u64().ok_or_else(|| bad("truncated dims"))?;
        shape.push(usize::try_from(d).map_err(|_| bad("dimension overflow"))?);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad("dimension overflow"))?;
    if bytes.len() - cur.pos != n * 8 {
        return Err(bad(&format!(
            "payload is {} bytes, shape {:?} needs {}",
            bytes.len() - cur.pos,
            shape,
            n * 8
        )));
    }
    let data = (0..n)
        .map(|_| f64::from_le_bytes(cur.take(8).unwrap().try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))
}

pub fn write_dgft(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read_dgft(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::matrix(1, 2, vec![1.0, -2.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"DGFT");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..12], &[2, 0, 0, 0]);
        assert_eq!(&b[12..20], &1u64.to_le_bytes());
        assert_eq!(&b[20..28], &2u64.to_le_bytes());
        assert_eq!(&b[28..36], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 44);
    }

    #[test]
    fn rejects_corruption() {
        let p = Path::new("mem");
        let mut b = encode(&Tensor::zeros(&[3]));
        assert!(decode(&b[..b.len() - 1], p).is_err());
        b[0] = b'X';
        assert!(decode(&b, p).is_err());
        let mut v = encode(&Tensor::zeros(&[3]));
        v[4] = 2;
        assert!(decode(&v, p).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(dims in proptest::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|i| ((seed as f64) * 1e-9 + i as f64).sin()).collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = decode(&encode(&t), Path::new("mem")).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
