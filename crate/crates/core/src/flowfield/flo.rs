//! Middlebury-style `.flo` files: `"PIEH"`, little-endian `i32` width and height,
//! then interleaved `(u, v)` little-endian `f32` pairs in row-major order.

use std::fs;
use std::path::Path;

use super::FlowField;
use crate::error::{Error, Result};

pub const FLO_MAGIC: &[u8; 4] = b"PIEH";
const HEADER_LEN: usize = 12;

pub fn encode_flow(f: &FlowField) -> Result<Vec<u8>> {
    if f.width() == 0 || f.height() == 0 {
        return Err(Error::invalid(format!(
            "cannot write a {}x{} flow field",
            f.width(),
            f.height()
        )));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * f.width() * f.height());
    out.extend_from_slice(FLO_MAGIC);
    out.extend_from_slice(&(f.width() as i32).to_le_bytes());
    out.extend_from_slice(&(f.height() as i32).to_le_bytes());
    for (u, v) in f.u().iter().zip(f.v()) {
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_flow(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 4 {
        return Err(Error::format("flo", bytes.len() as u64, "truncated magic"));
    }
    if &bytes[..4] != FLO_MAGIC {
        return Err(Error::format("flo", 0, "bad magic, expected \"PIEH\""));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::format("flo", bytes.len() as u64, "truncated header"));
    }
    let width = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let height = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if width <= 0 || height <= 0 {
        return Err(Error::format(
            "flo",
            4,
            format!("invalid dimensions {width}x{height}"),
        ));
    }
    let (w, h) = (width as usize, height as usize);
    let expected = HEADER_LEN + 8 * w * h;
    if bytes.len() < expected {
        return Err(Error::format(
            "flo",
            bytes.len() as u64,
            format!("truncated payload, expected {expected} bytes"),
        ));
    }
    if bytes.len() > expected {
        return Err(Error::format("flo", expected as u64, "trailing bytes"));
    }
    let mut u = Vec::with_capacity(w * h);
    let mut v = Vec::with_capacity(w * h);
    for pair in bytes[HEADER_LEN..].chunks_exact(8) {
        u.push(f32::from_le_bytes(pair[..4].try_into().unwrap()));
        v.push(f32::from_le_bytes(pair[4..].try_into().unwrap()));
    }
    FlowField::new(w, h, u, v)
}

pub fn write_flow(f: &FlowField, path: &Path) -> Result<()> {
    let bytes = encode_flow(f).map_err(|e| e.at_path(path))?;
    fs::write(path, bytes).map_err(|e| Error::from(e).at_path(path))
}

pub fn read_flow(path: &Path) -> Result<FlowField> {
    let bytes = fs::read(path).map_err(|e| Error::from(e).at_path(path))?;
    decode_flow(&bytes).map_err(|e| e.at_path(path))
}
