//! GSTK binary kernel files (little-endian):
//!
//! ```text
//! "GSTK" | version u32 = 1 | n_pixels u64 | n_targets u64 | cutoff_d f64
//!   | row offsets (n_pixels + 1) x u64 | columns nnz x u32 | weights nnz x f64
//!   | CRC32 of everything before it, u32
//! ```

use std::fs;
use std::path::Path;

use super::TransportKernel;
use crate::error::{Error, Result};

pub const GSTK_MAGIC: &[u8; 4] = b"GSTK";
pub const GSTK_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 8 + 8;

pub fn encode_kernel(kernel: &TransportKernel) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + kernel.offsets().len() * 8 + kernel.nnz() * 12 + 4);
    out.extend_from_slice(GSTK_MAGIC);
    out.extend_from_slice(&GSTK_VERSION.to_le_bytes());
    out.extend_from_slice(&(kernel.n_pixels() as u64).to_le_bytes());
    out.extend_from_slice(&(kernel.n_targets() as u64).to_le_bytes());
    out.extend_from_slice(&kernel.cutoff_d().to_le_bytes());
    for &o in kernel.offsets() {
        out.extend_from_slice(&o.to_le_bytes());
    }
    for &c in kernel.cols() {
        out.extend_from_slice(&c.to_le_bytes());
    }
    for &w in kernel.weights() {
        out.extend_from_slice(&w.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| Error::Truncated(format!("file ends inside {what}")))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_kernel(bytes: &[u8]) -> Result<TransportKernel> {
    if bytes.len() < 4 || &bytes[..4] != GSTK_MAGIC {
        return Err(Error::BadMagic);
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u32("header")?;
    if version != GSTK_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let n_pixels = cur.u64("header")? as usize;
    let n_targets = cur.u64("header")? as usize;
    let cutoff_d = cur.f64("header")?;

    let offset_bytes = n_pixels
        .checked_add(1)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Truncated("row count overflows".into()))?;
    let offsets: Vec<u64> = cur
        .take(offset_bytes, "row offsets")?
        .chunks_exact(8)
        .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let nnz = *offsets.last().unwrap() as usize;
    let cols: Vec<u32> = cur
        .take(nnz.saturating_mul(4), "column indices")?
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let weights: Vec<f64> = cur
        .take(nnz.saturating_mul(8), "weights")?
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let body_len = cur.pos;
    let stored = cur.u32("checksum")?;
    let computed = crc32fast::hash(&bytes[..body_len]);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Parse("trailing bytes after checksum".into()));
    }
    TransportKernel::from_csr(n_targets, cutoff_d, offsets, cols, weights)
}

pub fn save_kernel(kernel: &TransportKernel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_kernel(kernel)).map_err(|e| Error::io(path, e))
}

pub fn load_kernel(path: impl AsRef<Path>) -> Result<TransportKernel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_kernel(&bytes)
}
