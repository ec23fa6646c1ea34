//! Binary raster formats: depth maps and masks.
//!
//! Depth raster layout (little endian):
//!   bytes 0..4   width  (u32)
//!   bytes 4..8   height (u32)
//!   bytes 8..    width * height * 4 bytes of f32 depth, row-major,
//!                0.0 = no measurement
//!
//! Masks are binary 8-bit PGM (`P5`, maxval 255) with 0 = outside and
//! 255 = inside; any other sample value is rejected.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::geom::{DepthMap, Mask};
use crate::{Error, Result};

pub fn save_depth(depth: &DepthMap, path: &Path) -> Result<()> {
    let mut bytes =
        Vec::with_capacity(8 + depth.values().len() * 4);
    bytes.extend_from_slice(&depth.width().to_le_bytes());
    bytes.extend_from_slice(&depth.height().to_le_bytes());
    for v in depth.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_depth(path: &Path) -> Result<DepthMap> {
    let bytes =
        fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if bytes.len() < 8 {
        return Err(Error::file_format(path, "depth raster shorter than its 8-byte header"));
    }
    let width = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let expected = (width as usize)
        .checked_mul(height as usize)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(8))
        .ok_or_else(|| Error::file_format(path, "depth raster dimensions overflow"))?;
    if bytes.len() != expected {
        return Err(Error::file_format(
            path,
            format!("expected {expected} bytes for {width}x{height}, found {}", bytes.len()),
        ));
    }
    let mut values = Vec::with_capacity(width as usize * height as usize);
    for chunk in bytes[8..].chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    DepthMap::from_values(width, height, values)
        .map_err(|e| Error::file_format(path, e.to_string()))
}

pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(mask.bits().len() + 32);
    write!(out, "P5\n{} {}\n255\n", mask.width(), mask.height())
        .expect("in-memory write cannot fail");
    out.extend(mask.bits().iter().map(|&b| if b { 255u8 } else { 0u8 }));
    fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let bytes =
        fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut pos = 0usize;

    let mut next_token = |bytes: &[u8]| -> Result<String> {
        // Skip whitespace and '#' comments, then take one token.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::file_format(path, "truncated PGM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = next_token(&bytes)?;
    if magic != "P5" {
        return Err(Error::file_format(path, format!("expected P5 magic, found '{magic}'")));
    }
    let parse_dim = |tok: String| -> Result<u32> {
        tok.parse::<u32>()
            .map_err(|_| Error::file_format(path, format!("bad PGM dimension '{tok}'")))
    };
    let width = parse_dim(next_token(&bytes)?)?;
    let height = parse_dim(next_token(&bytes)?)?;
    let maxval = next_token(&bytes)?;
    if maxval != "255" {
        return Err(Error::file_format(path, format!("expected maxval 255, found '{maxval}'")));
    }
    // Exactly one whitespace byte separates the header from the samples.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::file_format(path, "missing separator after PGM header"));
    }
    pos += 1;
    let n = (width as usize)
        .checked_mul(height as usize)
        .ok_or_else(|| Error::file_format(path, "PGM dimensions overflow"))?;
    let data = &bytes[pos..];
    if data.len() != n {
        return Err(Error::file_format(
            path,
            format!("expected {n} samples for {width}x{height}, found {}", data.len()),
        ));
    }
    let mut bits = Vec::with_capacity(n);
    for (i, &b) in data.iter().enumerate() {
        match b {
            0 => bits.push(false),
            255 => bits.push(true),
            other => {
                return Err(Error::file_format(
                    path,
                    format!("sample {i} has value {other}; masks must be 0 or 255"),
                ));
            }
        }
    }
    Mask::from_bits(width, height, bits).map_err(|e| Error::file_format(path, e.to_string()))
}
