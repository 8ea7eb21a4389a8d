//! Raw array container shared by every on-disk artifact (clips, mels,
//! pitch tracks, unit ids, codebooks).
//!
//! Layout, all little-endian:
//!
//! ```text
//! offset  size      field
//! 0       4         magic  b"L2SA"
//! 4       4         u32    format version (1)
//! 8       4         u32    ndim
//! 12      8*ndim    u64    dims, outermost first
//! ...     4*prod    f32    row-major payload
//! ```
//!
//! Integer-valued arrays (unit ids, voicing flags) are stored as exact f32.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"L2SA";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Array {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} imply {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut cur = bytes;
        let mut word = [0u8; 4];
        cur.read_exact(&mut word).map_err(|_| bad("truncated header"))?;
        if &word != MAGIC {
            return Err(bad("bad magic"));
        }
        cur.read_exact(&mut word).map_err(|_| bad("truncated header"))?;
        if u32::from_le_bytes(word) != VERSION {
            return Err(bad("unsupported version"));
        }
        cur.read_exact(&mut word).map_err(|_| bad("truncated header"))?;
        let ndim = u32::from_le_bytes(word) as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut d = [0u8; 8];
            cur.read_exact(&mut d).map_err(|_| bad("truncated dims"))?;
            dims.push(u64::from_le_bytes(d) as usize);
        }
        let n: usize = dims.iter().product();
        if cur.len() != 4 * n {
            return Err(bad("payload length does not match dims"));
        }
        let data = cur
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }

    /// Reads a file and checks it has `ndim` dimensions.
    pub fn read_ndim(path: &Path, ndim: usize) -> Result<Self> {
        let a = Self::read(path)?;
        if a.dims.len() != ndim {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("expected {ndim} dims, found {:?}", a.dims),
            });
        }
        Ok(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = Array::new(vec![2], vec![1.0, 2.0]).unwrap().to_bytes();
        bytes[0] = b'X';
        assert!(Array::from_bytes(&bytes, Path::new("x")).is_err());
    }

    #[test]
    fn rejects_truncated_payload() {
        let bytes = Array::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().to_bytes();
        assert!(Array::from_bytes(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = Array::new(vec![1, 2], vec![0.5, -1.0]).unwrap().to_bytes();
        assert_eq!(&bytes[..4], b"L2SA");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[20..28].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 12 + 16 + 8);
    }

    proptest! {
        #[test]
        fn bytes_round_trip(dims in proptest::collection::vec(1usize..5, 0..4), seed in 0u32..1000) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| (i as f32 + seed as f32).sin()).collect();
            let a = Array::new(dims, data).unwrap();
            let b = Array::from_bytes(&a.to_bytes(), Path::new("mem")).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
