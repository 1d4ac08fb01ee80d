//! Binary PPM (`P6`, maxval 255) frames.

use std::fs;
use std::path::Path;

use super::Frame;
use crate::error::{Error, Result};

pub fn encode_ppm(frame: &Frame) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", frame.width(), frame.height()).into_bytes();
    out.extend(
        frame
            .data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    out
}

/// Parse the next whitespace-delimited header token, skipping `#` comments.
fn header_token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format(
            "ppm",
            start as u64,
            "expected a decimal header field",
        ));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .unwrap()
        .parse()
        .map_err(|_| Error::format("ppm", start as u64, "header field out of range"))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Frame> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::format("ppm", 0, "bad magic, expected \"P6\""));
    }
    let mut pos = 2;
    let width = header_token(bytes, &mut pos)?;
    let height = header_token(bytes, &mut pos)?;
    let maxval_at = pos;
    let maxval = header_token(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(Error::format(
            "ppm",
            maxval_at as u64,
            format!("unsupported maxval {maxval}"),
        ));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format(
            "ppm",
            pos as u64,
            "missing separator before raster",
        ));
    }
    pos += 1;
    let need = width * height * 3;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(Error::format(
            "ppm",
            bytes.len() as u64,
            format!("truncated raster, expected {need} bytes"),
        ));
    }
    let data = raster[..need].iter().map(|&b| b as f64 / 255.0).collect();
    Frame::new(width, height, data)
}

pub fn write_ppm(frame: &Frame, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(frame)).map_err(|e| Error::from(e).at_path(path))
}

pub fn read_ppm(path: &Path) -> Result<Frame> {
    let bytes = fs::read(path).map_err(|e| Error::from(e).at_path(path))?;
    decode_ppm(&bytes).map_err(|e| e.at_path(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantised_round_trip() {
        let f = Frame::new(2, 1, vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1]).unwrap();
        let back = decode_ppm(&encode_ppm(&f)).unwrap();
        for (a, b) in f.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        // quantised frames are fixed points
        assert_eq!(decode_ppm(&encode_ppm(&back)).unwrap(), back);
    }

    #[test]
    fn header_comments_and_truncation() {
        let bytes = b"P6\n# made by hand\n1 1\n255\n\x00\x80\xff";
        let f = decode_ppm(bytes).unwrap();
        assert_eq!(f.pixel(0, 0), [0.0, 128.0 / 255.0, 1.0]);
        assert!(decode_ppm(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_ppm(b"P3\n1 1\n255\n").is_err());
    }
}
