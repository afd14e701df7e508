//! File formats shared across the toolkit: the `NSHAPE01` named-array
//! container (checkpoints), P6 PPM images, plain-text pose files, and the
//! CRC32 used to seal binary payloads.

use crate::tensor::{Shape, Tensor};
use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}: bad magic, expected `{expected}`")]
    BadMagic { path: String, expected: &'static str },
    #[error("{path}: truncated, expected {expected} bytes, got {actual}")]
    Truncated { path: String, expected: usize, actual: usize },
    #[error("{path}: CRC mismatch (stored {stored:08x}, computed {computed:08x})")]
    CrcMismatch { path: String, stored: u32, computed: u32 },
    #[error("{path}: malformed {what}")]
    Malformed { path: String, what: String },
    #[error("{path}: payload contains non-finite values")]
    NonFinite { path: String },
}

pub(crate) fn malformed(path: &Path, what: impl Into<String>) -> FormatError {
    FormatError::Malformed { path: path.display().to_string(), what: what.into() }
}

// ---- CRC32 (IEEE, reflected, poly 0xEDB88320) ----

fn crc32_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = i as u32;
        let mut k = 0;
        while k < 8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            k += 1;
        }
        table[i] = c;
        i += 1;
    }
    table
}

pub fn crc32(data: &[u8]) -> u32 {
    static TABLE: std::sync::OnceLock<[u32; 256]> = std::sync::OnceLock::new();
    let table = TABLE.get_or_init(crc32_table);
    let mut c = 0xFFFF_FFFFu32;
    for &b in data {
        c = table[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ 0xFFFF_FFFF
}

// ---- byte cursor helpers ----

pub(crate) struct Cursor<'a> {
    pub data: &'a [u8],
    pub pos: usize,
    pub path: &'a Path,
}

impl<'a> Cursor<'a> {
    pub fn new(data: &'a [u8], path: &'a Path) -> Self {
        Cursor { data, pos: 0, path }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.pos + n > self.data.len() {
            return Err(FormatError::Truncated {
                path: self.path.display().to_string(),
                expected: self.pos + n,
                actual: self.data.len(),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f64(&mut self) -> Result<f64, FormatError> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }
}

// ---- NSHAPE01 container: ordered named f64 arrays ----

pub const CONTAINER_MAGIC: &[u8; 8] = b"NSHAPE01";

/// Serialize named tensors in the given order. Layout: magic, u32 entry
/// count, then per entry a u32 name length, the name bytes, u32 rank, u32
/// dims, and the raw little-endian f64 payload; a CRC32 of everything before
/// it closes the file.
pub fn write_container(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let dims: Vec<u32> = match t.shape {
            Shape::Scalar => vec![],
            Shape::Vector(n) => vec![n as u32],
            Shape::Matrix(r, c) => vec![r as u32, c as u32],
        };
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn read_container(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>, FormatError> {
    if bytes.len() < CONTAINER_MAGIC.len() + 8 {
        return Err(FormatError::Truncated {
            path: path.display().to_string(),
            expected: CONTAINER_MAGIC.len() + 8,
            actual: bytes.len(),
        });
    }
    if &bytes[..8] != CONTAINER_MAGIC {
        return Err(FormatError::BadMagic { path: path.display().to_string(), expected: "NSHAPE01" });
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32(body);
    if stored != computed {
        return Err(FormatError::CrcMismatch {
            path: path.display().to_string(),
            stored,
            computed,
        });
    }
    let mut cur = Cursor::new(body, path);
    cur.pos = 8;
    let count = cur.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| malformed(path, "entry name is not UTF-8"))?;
        let rank = cur.u32()? as usize;
        if rank > 2 {
            return Err(malformed(path, format!("entry `{name}` has rank {rank}")));
        }
        let mut dims = [0usize; 2];
        for d in dims.iter_mut().take(rank) {
            *d = cur.u32()? as usize;
        }
        let shape = match rank {
            0 => Shape::Scalar,
            1 => Shape::Vector(dims[0]),
            _ => Shape::Matrix(dims[0], dims[1]),
        };
        let n = shape.len();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(cur.f64()?);
        }
        entries.push((name, Tensor { shape, data }));
    }
    if cur.pos != body.len() {
        return Err(malformed(path, format!("{} trailing bytes", body.len() - cur.pos)));
    }
    Ok(entries)
}

pub fn save_container(path: &Path, entries: &[(String, Tensor)]) -> Result<(), FormatError> {
    let bytes = write_container(entries);
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_container(path: &Path) -> Result<Vec<(String, Tensor)>, FormatError> {
    let bytes = fs::read(path)?;
    read_container(&bytes, path)
}

// ---- PPM (P6, 8-bit) ----

/// Encode an rgb image with components in [0, 1]; values are clamped and
/// rounded to 8 bits.
pub fn write_ppm(width: usize, height: usize, rgb: &[[f64; 3]]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for px in rgb {
        for c in px {
            let q = (c.clamp(0.0, 1.0) * 255.0).round() as u8;
            out.push(q);
        }
    }
    out
}

pub fn save_ppm(path: &Path, width: usize, height: usize, rgb: &[[f64; 3]]) -> Result<(), FormatError> {
    fs::write(path, write_ppm(width, height, rgb))?;
    Ok(())
}

/// Decode a P6 PPM into [0, 1] rgb rows (row-major).
pub fn load_ppm(path: &Path) -> Result<(usize, usize, Vec<[f64; 3]>), FormatError> {
    let bytes = fs::read(path)?;
    read_ppm(&bytes, path)
}

pub fn read_ppm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<[f64; 3]>), FormatError> {
    if !bytes.starts_with(b"P6") {
        return Err(FormatError::BadMagic { path: path.display().to_string(), expected: "P6" });
    }
    // Header: three whitespace-separated fields after the magic, with
    // optional comment lines.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed(path, "PPM header"))?;
    }
    pos += 1; // single whitespace after maxval
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(malformed(path, format!("unsupported maxval {maxval}")));
    }
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(FormatError::Truncated {
            path: path.display().to_string(),
            expected: pos + need,
            actual: bytes.len(),
        });
    }
    let mut rgb = Vec::with_capacity(w * h);
    for i in 0..w * h {
        let o = pos + i * 3;
        rgb.push([
            bytes[o] as f64 / 255.0,
            bytes[o + 1] as f64 / 255.0,
            bytes[o + 2] as f64 / 255.0,
        ]);
    }
    Ok((w, h, rgb))
}
