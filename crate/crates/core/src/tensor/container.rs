//! Flat binary weight container.
//!
//! Layout: the 8-byte magic `FADEKIT1`, then one record per tensor until end
//! of file. A record is the name length (`u64` LE), the UTF-8 name bytes,
//! the rank (`u64` LE), each dimension (`u64` LE) and finally the values as
//! `f64` LE in row-major order.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FADEKIT1";

// guards against absurd allocations from a corrupt header
const MAX_NAME_LEN: u64 = 4096;
const MAX_RANK: u64 = 16;

pub type NamedTensor = (String, Tensor);

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        kind: "weight container",
        detail: detail.into(),
    }
}

pub fn write_tensors<W: Write>(mut w: W, tensors: &[NamedTensor]) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_u64(buf: &[u8], pos: &mut usize) -> Result<u64> {
    let bytes = buf.get(*pos..*pos + 8).ok_or_else(|| format_err("truncated record"))?;
    *pos += 8;
    Ok(u64::from_le_bytes(bytes.try_into().expect("8 bytes")))
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<NamedTensor>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)
        .map_err(|e| format_err(format!("read failed: {e}")))?;
    if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
        return Err(format_err("bad magic"));
    }
    let mut pos = MAGIC.len();
    let mut out = Vec::new();
    while pos < buf.len() {
        let name_len = read_u64(&buf, &mut pos)?;
        if name_len > MAX_NAME_LEN {
            return Err(format_err(format!("name length {name_len}")));
        }
        let name_bytes = buf
            .get(pos..pos + name_len as usize)
            .ok_or_else(|| format_err("truncated name"))?;
        let name = String::from_utf8(name_bytes.to_vec()).map_err(|_| format_err("name is not UTF-8"))?;
        pos += name_len as usize;
        let rank = read_u64(&buf, &mut pos)?;
        if rank > MAX_RANK {
            return Err(format_err(format!("rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(read_u64(&buf, &mut pos)? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| format_err("dimension overflow"))?;
        let bytes = n
            .checked_mul(8)
            .and_then(|nb| buf.get(pos..pos + nb))
            .ok_or_else(|| format_err(format!("truncated data for {name}")))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        pos += n * 8;
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}
