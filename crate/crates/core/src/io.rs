//! Raw little-endian `f32` vectors.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub fn write_f32le(path: &Path, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32le(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_f32le(&bytes).ok_or_else(|| {
        Error::format(
            path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            format!("{} bytes is not a whole number of f32 values", bytes.len()),
        )
    })
}

pub fn decode_f32le(bytes: &[u8]) -> Option<Vec<f32>> {
    if !bytes.len().is_multiple_of(4) {
        return None;
    }
    Some(
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    )
}
