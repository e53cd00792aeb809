//! The `RIMW` named-tensor container.
//!
//! ```text
//! "RIMW" | version: u32 | count: u32 |
//!   count x ( name_len: u32 | name: utf-8 | rank: u32 | dims: u32 x rank | f32 x prod(dims) )
//! ```
//! All integers and reals are little-endian.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"RIMW";
pub const FORMAT_VERSION: u32 = 1;

/// Serialize named tensors in the given order.
pub fn write_tensors<W: Write>(mut out: W, tensors: &[(String, Tensor)]) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.dims() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()
}

/// Parse a whole container. Any truncation or malformed header is a
/// format error; nothing partial is returned.
pub fn read_tensors<R: Read>(mut input: R) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Format(format!("read failed: {e}")))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, expected RIMW".into()));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version}"
        )));
    }
    let count = cur.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not utf-8".into()))?
            .to_owned();
        let rank = cur.u32()? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("tensor {name}: rank {rank} too large")));
        }
        let dims = (0..rank)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let payload = cur.take(n.checked_mul(4).ok_or_else(|| {
            Error::Format(format!("tensor {name}: payload size overflows"))
        })?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::from_vec(&dims, data)?));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - cur.pos
        )));
    }
    Ok(out)
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
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Look up a tensor by name, failing with a schema error.
pub fn find<'a>(tensors: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    tensors
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Schema(format!("missing tensor {name}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn encode(tensors: &[(String, Tensor)]) -> Vec<u8> {
        let mut buf = Vec::new();
        write_tensors(&mut buf, tensors).unwrap();
        buf
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&[("a".into(), Tensor::scalar(1.5))]);
        assert_eq!(&bytes[..4], b"RIMW");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1);
        assert_eq!(bytes[16], b'a');
        assert_eq!(u32::from_le_bytes(bytes[17..21].try_into().unwrap()), 0);
        assert_eq!(f32::from_le_bytes(bytes[21..25].try_into().unwrap()), 1.5);
        assert_eq!(bytes.len(), 25);
    }

    #[test]
    fn every_truncation_is_a_format_error() {
        let bytes = encode(&[
            ("w".into(), Tensor::full(&[2, 3], 0.25)),
            ("b".into(), Tensor::full(&[3], -1.0)),
        ]);
        for cut in 0..bytes.len() {
            assert!(matches!(read_tensors(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode(&[]);
        bytes[0] = b'X';
        assert!(matches!(read_tensors(bytes.as_slice()), Err(Error::Format(_))));
        let mut bytes = encode(&[]);
        bytes[4] = 9;
        assert!(matches!(read_tensors(bytes.as_slice()), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            entries in prop::collection::vec(
                ("[a-z.0-9]{1,12}", prop::collection::vec(1usize..4, 0..4), any::<u32>()),
                0..5,
            )
        ) {
            let tensors: Vec<(String, Tensor)> = entries
                .into_iter()
                .map(|(name, dims, seed)| {
                    let n: usize = dims.iter().product();
                    let data = (0..n)
                        .map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32) & 0x7f7f_ffff))
                        .collect();
                    (name, Tensor::from_vec(&dims, data).unwrap())
                })
                .collect();
            let bytes = encode(&tensors);
            let back = read_tensors(bytes.as_slice()).unwrap();
            prop_assert_eq!(back.len(), tensors.len());
            for ((n1, t1), (n2, t2)) in tensors.iter().zip(&back) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1.dims(), t2.dims());
                let b1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
                let b2: Vec<u32> = t2.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(b1, b2);
            }
            prop_assert_eq!(encode(&back), bytes);
        }
    }
}
