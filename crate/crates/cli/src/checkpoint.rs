//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    4 bytes  "TCC1"
//! version  u16      1
//! records  repeated until the trailer:
//!   name_len u32, name (UTF-8), rank u32, extents u64 x rank,
//!   values f64 x product(extents)
//! checksum u64      FNV-1a 64 of every preceding byte
//! ```
//!
//! FNV-1a folds each byte through a bijection of the running state, so any
//! single-byte change alters the checksum.

use std::path::Path;

use tcc_core::params::ParamStore;
use tcc_core::Tensor;

use crate::fsutil::atomic_write;

pub const MAGIC: &[u8; 4] = b"TCC1";
pub const VERSION: u16 = 1;
const HEADER: usize = 6;
const TRAILER: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("file is {0} bytes, too short for a checkpoint")]
    TooShort(usize),
    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    Version(u16),
    #[error("record {index} truncated at byte {offset}")]
    Truncated { index: usize, offset: usize },
    #[error("record {index}: name is not UTF-8")]
    Name { index: usize },
    #[error("record {index}: extents overflow")]
    Extents { index: usize },
    #[error(transparent)]
    Params(#[from] tcc_core::Error),
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}

pub fn encode<'a>(params: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    index: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated {
            index: self.index,
            offset: self.pos,
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Verifies the checksum and header, then decodes every record in order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    if bytes.len() < HEADER + TRAILER {
        return Err(CheckpointError::TooShort(bytes.len()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - TRAILER);
    let stored = u64::from_le_bytes(trailer.try_into().expect("8 bytes"));
    let computed = fnv1a64(body);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    let magic: [u8; 4] = body[..4].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = u16::from_le_bytes([body[4], body[5]]);
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mut r = Reader {
        bytes: body,
        pos: HEADER,
        index: 0,
    };
    let mut out = Vec::new();
    while r.pos < body.len() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::Name { index: r.index })?
            .to_owned();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| CheckpointError::Extents { index: r.index })?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|c| c.checked_mul(8).is_some())
            .ok_or(CheckpointError::Extents { index: r.index })?;
        let raw = r.take(count * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        out.push((name, Tensor::new(&shape, data)?));
        r.index += 1;
    }
    Ok(out)
}

pub fn save(path: &Path, store: &ParamStore) -> Result<(), CheckpointError> {
    atomic_write(path, &encode(store.iter()))?;
    Ok(())
}

/// Reads a checkpoint into `store`, whose names and shapes must match.
pub fn load_into(path: &Path, store: &mut ParamStore) -> Result<(), CheckpointError> {
    let bytes = std::fs::read(path)?;
    store.load(decode(&bytes)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_store_is_header_and_checksum() {
        let bytes = encode(std::iter::empty());
        assert_eq!(bytes.len(), HEADER + TRAILER);
        assert_eq!(&bytes[..4], b"TCC1");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert!(decode(&bytes).unwrap().is_empty());
    }

    #[test]
    fn layout_of_one_record() {
        let t = Tensor::new(&[2], vec![1.5, -2.0]).unwrap();
        let bytes = encode([("ab", &t)]);
        let mut expect = b"TCC1\x01\x00".to_vec();
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(b"ab");
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&1.5f64.to_le_bytes());
        expect.extend_from_slice(&(-2.0f64).to_le_bytes());
        let sum = fnv1a64(&expect);
        expect.extend_from_slice(&sum.to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn wrong_version_rejected_even_with_valid_checksum() {
        let mut body = b"TCC1\x02\x00".to_vec();
        let sum = fnv1a64(&body);
        body.extend_from_slice(&sum.to_le_bytes());
        assert!(matches!(decode(&body), Err(CheckpointError::Version(2))));
    }
}
