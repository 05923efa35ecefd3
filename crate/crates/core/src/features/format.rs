//! The `AVF1` tensor container.
//!
//! Layout (little-endian):
//! - magic: the four bytes `AVF1`
//! - one or more blocks, each:
//!   - rank: u32
//!   - extents: rank × u32
//!   - payload: product(extents) × f32
//!
//! Feature files hold two blocks (audio, then visual). Checkpoint tensors
//! hold one block per file.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, MAX_RANK};

pub const MAGIC: &[u8; 4] = b"AVF1";

pub fn encode(blocks: &[&Tensor<f32>]) -> Vec<u8> {
    let payload: usize = blocks
        .iter()
        .map(|t| 4 + 4 * t.rank() + 4 * t.numel())
        .sum();
    let mut out = Vec::with_capacity(4 + payload);
    out.extend_from_slice(MAGIC);
    for t in blocks {
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses a whole container. `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<Tensor<f32>>> {
    let mut cur = Cursor { bytes, pos: 0, path };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(path, format!("bad magic {magic:?}")));
    }
    let mut blocks = Vec::new();
    while cur.pos < bytes.len() {
        let rank = cur.u32("rank")? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::format(
                path,
                format!("block {} has rank {rank}", blocks.len()),
            ));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let e = cur.u32("extent")? as usize;
            if e == 0 {
                return Err(Error::format(
                    path,
                    format!("block {} has a zero extent", blocks.len()),
                ));
            }
            shape.push(e);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|n| n.checked_mul(4).is_some())
            .ok_or_else(|| Error::format(path, format!("extents {shape:?} overflow")))?;
        let raw = cur.take(numel * 4, "payload")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        blocks.push(Tensor::new(&shape, data)?);
    }
    if blocks.is_empty() {
        return Err(Error::format(path, "container has no blocks"));
    }
    Ok(blocks)
}

pub fn write_file(path: &Path, blocks: &[&Tensor<f32>]) -> Result<()> {
    let bytes = encode(blocks);
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    file.sync_all().map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<Tensor<f32>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.path,
                format!(
                    "truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn layout_is_magic_rank_extents_payload() {
        let t = Tensor::new(&[2], vec![1.0f32, -2.0]).unwrap();
        let bytes = encode(&[&t]);
        let mut expected = b"AVF1".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn every_truncation_is_a_format_error() {
        let a = Tensor::from_fn(&[2, 3], |i| i as f32);
        let v = Tensor::from_fn(&[2, 1, 1, 2], |i| -(i as f32));
        let bytes = encode(&[&a, &v]);
        for cut in 0..bytes.len() {
            let r = decode(&bytes[..cut], p());
            // a cut exactly at a block boundary is a valid shorter container
            if cut == 4 + 4 + 8 + 24 {
                assert_eq!(r.unwrap().len(), 1);
                continue;
            }
            assert!(matches!(r, Err(Error::Format { .. })), "cut {cut}");
        }
    }

    #[test]
    fn bad_magic_and_bad_rank_rejected() {
        let t = Tensor::from_fn(&[3], |i| i as f32);
        let mut bytes = encode(&[&t]);
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes, p()), Err(Error::Format { .. })));
        let mut bytes = encode(&[&t]);
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(decode(&bytes, p()), Err(Error::Format { .. })));
        let mut bytes = encode(&[&t]);
        bytes[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode(&bytes, p()), Err(Error::Format { .. })));
    }

    #[test]
    fn huge_extents_do_not_allocate() {
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&4u32.to_le_bytes());
        for _ in 0..4 {
            bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(decode(&bytes, p()), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            shape in prop::collection::vec(1usize..5, 1..=4),
            seed in any::<u32>(),
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|i| f32::from_bits((seed as u64 * 2654435761 + i as u64 * 40503) as u32 & 0x7f7f_ffff))
                .collect();
            let t = Tensor::new(&shape, data).unwrap();
            let back = decode(&encode(&[&t, &t]), p()).unwrap();
            prop_assert_eq!(back.len(), 2);
            for b in back {
                prop_assert_eq!(b.shape(), t.shape());
                let same = b.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits());
                prop_assert!(same);
            }
        }
    }
}
