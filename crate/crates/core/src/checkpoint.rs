//! Tensor container: 4-byte magic, then per tensor `u32 rank`, `u32 dims[rank]`
//! and little-endian `f64` data, until end of file.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub fn encode_tensors(magic: &[u8; 4], tensors: &[Tensor]) -> Vec<u8> {
    let mut out = magic.to_vec();
    for t in tensors {
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_tensors(magic: &[u8; 4], bytes: &[u8]) -> Result<Vec<Tensor>> {
    let bad = |msg: String| Error::Format {
        kind: "checkpoint",
        msg,
    };
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(bad(format!(
            "expected magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut at: usize = 4;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = at
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad(format!("truncated at byte {at}")))?;
        let s = &bytes[at..end];
        at = end;
        Ok(s)
    };
    let mut out = Vec::new();
    loop {
        let rank = match take(4) {
            Ok(b) => u32::from_le_bytes(b.try_into().unwrap()) as usize,
            Err(_) => break,
        };
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| bad("tensor size overflows".into()))?;
        let data = take(numel)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(Tensor::new(&shape, data)?);
    }
    if at != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - at)));
    }
    Ok(out)
}
