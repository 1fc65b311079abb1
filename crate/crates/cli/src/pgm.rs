//! Binary greymap (P5, maxval 255) reading and writing.

use std::io::Write;
use std::path::Path;

use dcf_core::error::{DcfError, Result};
use dcf_core::tensor::Tensor;

fn header_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(DcfError::Format("PGM header ends early".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    tok.parse().map_err(|_| DcfError::Format(format!("PGM {what} `{tok}` is not a number")))
}

/// Decodes a P5 image into a single-channel tensor with values `p / 255`.
pub fn decode(bytes: &[u8]) -> Result<Tensor<f64>> {
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos)?;
    if magic != "P5" {
        return Err(DcfError::Format(format!("expected a binary PGM (P5), found `{magic}`")));
    }
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(DcfError::Format(format!("only maxval 255 is supported, found {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(DcfError::Format("PGM has zero size".into()));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let raster = bytes.get(pos..pos + width * height).ok_or_else(|| {
        DcfError::Format(format!("PGM raster needs {} bytes, found {}", width * height, bytes.len().saturating_sub(pos)))
    })?;
    Tensor::new(height, width, 1, raster.iter().map(|&p| f64::from(p) / 255.0).collect())
}

/// Encodes channel 0 of `image`, mapping `v` to `floor(255 v + 0.5)`
/// clamped to `0..=255`.
pub fn encode(image: &Tensor<f64>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    for r in 0..image.height() {
        for c in 0..image.width() {
            out.push((image.at(r, c, 0) * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

pub fn read(path: &Path) -> Result<Tensor<f64>> {
    decode(&std::fs::read(path)?)
}

pub fn write(path: &Path, image: &Tensor<f64>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(image))?;
    Ok(())
}
