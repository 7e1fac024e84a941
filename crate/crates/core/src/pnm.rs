//! Binary PPM (P6) images and PGM (P5) label maps.
//!
//! Images travel as `[3, H, W]` tensors with values in `[0, 1]` and are
//! quantized to 8 bits on write (`round(v * 255)`), so a read-back image
//! equals the quantized original exactly. Label maps store raw class
//! indices, one byte per pixel.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Tensor};

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an RGB image (`[3, H, W]`, values in `[0, 1]`) as binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!("PPM image needs 3 channels, got {c}")));
    }
    let mut bytes = Vec::with_capacity(32 + 3 * h * w);
    bytes.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    let data = image.data();
    let plane = h * w;
    for i in 0..plane {
        bytes.push(quantize(data[i]));
        bytes.push(quantize(data[plane + i]));
        bytes.push(quantize(data[2 * plane + i]));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Writes a label map as binary PGM, one class index per pixel.
pub fn write_pgm(path: &Path, labels: &LabelMap) -> Result<()> {
    let (h, w) = (labels.height(), labels.width());
    let mut bytes = Vec::with_capacity(32 + h * w);
    bytes.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    bytes.extend_from_slice(labels.data());
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Reads a binary PPM into a `[3, H, W]` tensor with values in `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let (w, h, raster) = read_raster(path, b"P6", 3)?;
    let plane = h * w;
    let mut data = vec![0.0f64; 3 * plane];
    for i in 0..plane {
        data[i] = raster[3 * i] as f64 / 255.0;
        data[plane + i] = raster[3 * i + 1] as f64 / 255.0;
        data[2 * plane + i] = raster[3 * i + 2] as f64 / 255.0;
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Reads a binary PGM into a label map of raw class indices.
pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    let (w, h, raster) = read_raster(path, b"P5", 1)?;
    LabelMap::from_vec(h, w, raster)
}

/// Shared reader: parses the `magic / width / height / 255` header
/// (whitespace- and comment-tolerant) and returns the raster bytes.
fn read_raster(path: &Path, magic: &[u8], samples: usize) -> Result<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(
            path,
            format!("expected {} magic", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Skip whitespace and '#' comments between header fields.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while !matches!(bytes.get(pos), None | Some(b'\n')) {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while matches!(bytes.get(pos), Some(b) if b.is_ascii_digit()) {
            pos += 1;
        }
        if pos == start {
            return Err(Error::format(path, "malformed header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, "malformed header"))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format(path, format!("unsupported max value {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(Error::format(path, "zero-sized image"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !matches!(bytes.get(pos), Some(b) if b.is_ascii_whitespace()) {
        return Err(Error::format(path, "missing raster separator"));
    }
    pos += 1;
    let expected = w
        .checked_mul(h)
        .and_then(|p| p.checked_mul(samples))
        .ok_or_else(|| Error::format(path, "raster size overflows"))?;
    let raster = &bytes[pos..];
    if raster.len() != expected {
        return Err(Error::format(
            path,
            format!("raster holds {} bytes, expected {expected}", raster.len()),
        ));
    }
    Ok((w, h, raster.to_vec()))
}
