//! Binary container shared by model and dataset files:
//!
//! ```text
//! magic[4] | version u16 | manifest_len u32 | manifest (UTF-8 JSON)
//!          | value_count u64 | value_count x f64 | crc32 u32
//! ```
//!
//! All integers and floats are little-endian. The CRC32 covers every byte
//! from `manifest_len` up to (not including) the checksum itself.

use std::path::Path;

use crate::error::{Error, FormatError, Result};

pub(crate) fn encode(magic: [u8; 4], version: u16, manifest: &str, values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(22 + manifest.len() + values.len() * 8);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&version.to_le_bytes());
    let body_start = out.len();
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[body_start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(FormatError::Truncated { needed: self.pos + n, available: self.bytes.len() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

pub(crate) fn decode(bytes: &[u8], magic: [u8; 4], version: u16) -> Result<(String, Vec<f64>), FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    let found_magic = r.take(4).map_err(|_| FormatError::BadMagic { expected: magic, found: bytes.to_vec() })?;
    if found_magic != magic {
        return Err(FormatError::BadMagic { expected: magic, found: found_magic.to_vec() });
    }
    let found_version = u16::from_le_bytes(r.array()?);
    if found_version != version {
        return Err(FormatError::VersionMismatch { expected: version, found: found_version });
    }
    let body_start = r.pos;
    let manifest_len = u32::from_le_bytes(r.array()?) as usize;
    let manifest = r.take(manifest_len)?;
    let count = u64::from_le_bytes(r.array()?) as usize;
    let raw = r.take(count.checked_mul(8).ok_or(FormatError::Manifest("value count overflow".into()))?)?;
    let body_end = r.pos;
    let stored = u32::from_le_bytes(r.array()?);
    let computed = crc32fast::hash(&bytes[body_start..body_end]);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed });
    }
    if r.pos != bytes.len() {
        return Err(FormatError::TrailingBytes(bytes.len() - r.pos));
    }
    let manifest = String::from_utf8(manifest.to_vec()).map_err(|e| FormatError::Manifest(e.to_string()))?;
    let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((manifest, values))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
