//! Single-file model container: a fixed magic, a format version, a JSON
//! header describing the model, then a family-specific little-endian binary
//! payload. Loading a container reproduces scores bitwise.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"EVCM";
pub const FORMAT_VERSION: u32 = 1;

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Classifier(format!("model container: {}", detail.into()))
}

/// Writes `magic | version | header length | header | payload` atomically
/// (temp file + rename).
pub fn write_container(path: &Path, header_json: &[u8], payload: &[u8]) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + header_json.len() + payload.len());
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(header_json);
    bytes.extend_from_slice(payload);

    let tmp = path.with_extension("tmp-write");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a container back as (header JSON bytes, payload bytes).
pub fn read_container(path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    let bytes = std::fs::read(path)
        .map_err(|e| corrupt(format!("cannot read {}: {e}", path.display())))?;
    if bytes.len() < 16 || bytes[..4] != MAGIC {
        return Err(corrupt(format!("{} is not a model container", path.display())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(corrupt(format!(
            "{}: unsupported container version {version} (expected {FORMAT_VERSION})",
            path.display()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = 16usize.checked_add(header_len).filter(|&p| p <= bytes.len());
    let Some(payload_start) = payload_start else {
        return Err(corrupt(format!("{}: truncated header", path.display())));
    };
    Ok((bytes[16..payload_start].to_vec(), bytes[payload_start..].to_vec()))
}

/// Little-endian binary encoder for model payloads.
#[derive(Default)]
pub struct BinWriter {
    pub buf: Vec<u8>,
}

impl BinWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32_slice(&mut self, vs: &[f32]) {
        self.usize(vs.len());
        for v in vs {
            self.f32(*v);
        }
    }

    pub fn f64_slice(&mut self, vs: &[f64]) {
        self.usize(vs.len());
        for v in vs {
            self.f64(*v);
        }
    }

    pub fn u32_slice(&mut self, vs: &[u32]) {
        self.usize(vs.len());
        for v in vs {
            self.u32(*v);
        }
    }
}

/// Matching decoder; every read fails loudly on truncation.
pub struct BinReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> BinReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn done(&self) -> bool {
        self.pos >= self.buf.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| corrupt("payload truncated"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn usize(&mut self) -> Result<usize> {
        Ok(self.u64()? as usize)
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32_vec(&mut self) -> Result<Vec<f32>> {
        let len = self.len_guard(4)?;
        (0..len).map(|_| self.f32()).collect()
    }

    pub fn f64_vec(&mut self) -> Result<Vec<f64>> {
        let len = self.len_guard(8)?;
        (0..len).map(|_| self.f64()).collect()
    }

    pub fn u32_vec(&mut self) -> Result<Vec<u32>> {
        let len = self.len_guard(4)?;
        (0..len).map(|_| self.u32()).collect()
    }

    /// Reads a length prefix, rejecting values that cannot fit in the
    /// remaining bytes (guards against allocating on corrupt lengths).
    fn len_guard(&mut self, elem_size: usize) -> Result<usize> {
        let len = self.usize()?;
        if len.saturating_mul(elem_size) > self.buf.len() - self.pos {
            return Err(corrupt("length prefix exceeds payload"));
        }
        Ok(len)
    }
}
