//! Flat named-tensor file format.
//!
//! ```text
//! header:  "DPLX1" | endianness tag b'L' | scalar width (4 or 8) | count: u64
//! record:  name_len: u32 | name (UTF-8) | rank: u32 | extents: u64 × rank | scalars
//! ```
//! All integers and scalars are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const MAGIC: &[u8; 5] = b"DPLX1";
pub const LITTLE_ENDIAN: u8 = b'L';

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

pub fn encode<S: Scalar>(tensors: &[NamedTensor<S>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(LITTLE_ENDIAN);
    out.push(S::WIDTH);
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &e in &t.shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in &t.data {
            v.write_le(&mut out);
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated tensor file".into()))?;
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

pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<Vec<NamedTensor<S>>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(5).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("bad magic, not a DPLX1 tensor file".into()));
    }
    let tag = c.take(2)?;
    if tag[0] != LITTLE_ENDIAN {
        return Err(Error::Format(format!("unsupported endianness tag {:#x}", tag[0])));
    }
    if tag[1] != S::WIDTH {
        return Err(Error::Format(format!(
            "file stores {}-byte scalars, expected {} ({})",
            tag[1],
            S::WIDTH,
            S::NAME
        )));
    }
    let count = c.u64()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32()? as usize;
        let shape = (0..rank)
            .map(|_| c.u64().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let w = S::WIDTH as usize;
        let raw = c.take(n.checked_mul(w).ok_or_else(|| Error::Format("extent overflow".into()))?)?;
        let data = raw.chunks(w).map(S::read_le).collect();
        out.push(NamedTensor { name, shape, data });
    }
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after last record".into()));
    }
    Ok(out)
}

pub fn write<S: Scalar>(mut w: impl Write, tensors: &[NamedTensor<S>]) -> Result<()> {
    w.write_all(&encode(tensors))?;
    Ok(())
}

pub fn read<S: Scalar>(mut r: impl Read) -> Result<Vec<NamedTensor<S>>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn save<S: Scalar>(path: &Path, tensors: &[NamedTensor<S>]) -> Result<()> {
    std::fs::write(path, encode(tensors))?;
    Ok(())
}

pub fn load<S: Scalar>(path: &Path) -> Result<Vec<NamedTensor<S>>> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Vec<NamedTensor<f32>> {
        vec![
            NamedTensor { name: "a.w".into(), shape: vec![2, 3], data: vec![1.5, -0.0, f32::MIN_POSITIVE, 3., 4., 5.] },
            NamedTensor { name: "ünï".into(), shape: vec![], data: vec![f32::NAN] },
        ]
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample());
        assert_eq!(&bytes[..5], b"DPLX1");
        assert_eq!(bytes[5], b'L');
        assert_eq!(bytes[6], 4);
        assert_eq!(u64::from_le_bytes(bytes[7..15].try_into().unwrap()), 2);
    }

    #[test]
    fn corrupted_magic_is_format_error() {
        let mut bytes = encode(&sample());
        bytes[0] = b'X';
        assert!(matches!(decode::<f32>(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn width_mismatch_and_truncation() {
        let bytes = encode(&sample());
        assert!(matches!(decode::<f64>(&bytes), Err(Error::Format(_))));
        assert!(matches!(decode::<f32>(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn bit_exact_round_trip(
            names in proptest::collection::vec("[a-z.]{1,12}", 1..4),
            bits in proptest::collection::vec(any::<u64>(), 1..24),
        ) {
            let tensors: Vec<NamedTensor<f64>> = names.iter().map(|n| NamedTensor {
                name: n.clone(),
                shape: vec![bits.len()],
                data: bits.iter().map(|&b| f64::from_bits(b)).collect(),
            }).collect();
            let back = decode::<f64>(&encode(&tensors)).unwrap();
            prop_assert_eq!(back.len(), tensors.len());
            for (a, b) in back.iter().zip(&tensors) {
                prop_assert_eq!(&a.name, &b.name);
                prop_assert_eq!(&a.shape, &b.shape);
                let ab: Vec<u64> = a.data.iter().map(|v| v.to_bits()).collect();
                let bb: Vec<u64> = b.data.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(ab, bb);
            }
        }
    }
}
