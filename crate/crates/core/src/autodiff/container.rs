//! Versioned binary weight container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"CRNNW1"
//! repeated: u32 name_len | name (UTF-8) | u32 rank | u64 dim * rank | f64 * numel
//! u64 checksum
//! ```
//!
//! The checksum is the first eight bytes (read little-endian) of the SHA-256
//! digest over every payload byte, in file order.

use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 6] = b"CRNNW1";

pub fn encode<'a, I>(entries: I) -> Vec<u8>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let mut out = MAGIC.to_vec();
    let mut hasher = Sha256::new();
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let start = out.len();
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        hasher.update(&out[start..]);
    }
    out.extend_from_slice(&checksum(hasher).to_le_bytes());
    out
}

fn checksum(h: Sha256) -> u64 {
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses a complete container (nothing may follow the checksum).
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("missing CRNNW1 header".into()));
    }
    let body_end = bytes.len() - 8;
    let mut r = Reader {
        buf: &bytes[..body_end],
        pos: MAGIC.len(),
    };
    let mut hasher = Sha256::new();
    let mut out = Vec::new();
    while r.pos < body_end {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("`{name}` has implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format(format!("`{name}` dimensions overflow")))?;
        let payload = r.take(numel, "payload")?;
        hasher.update(payload);
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    let stored = u64::from_le_bytes(bytes[body_end..].try_into().unwrap());
    if stored != checksum(hasher) {
        return Err(Error::Format("checksum mismatch".into()));
    }
    Ok(out)
}
