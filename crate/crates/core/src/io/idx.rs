//! IDX container parsing (the format the 28x28 digit datasets ship in).
//!
//! Headers are big-endian: a 4-byte magic (`0x00000803` for rank-3 `u8`
//! images, `0x00000801` for rank-1 `u8` labels) followed by one `u32` per
//! dimension, then the raw payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Images parsed from an IDX file, each `[1, rows, cols]` in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct ImageSet {
    pub rows: usize,
    pub cols: usize,
    pub images: Vec<Tensor>,
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::CorruptFile(format!("truncated header: missing {what}")))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    if bytes.is_empty() {
        return Err(Error::CorruptFile("empty file".into()));
    }
    let magic = read_u32(bytes, 0, "magic number")?;
    if magic != expected {
        return Err(Error::Format(format!(
            "magic 0x{magic:08x}, expected 0x{expected:08x}"
        )));
    }
    Ok(())
}

fn check_payload(bytes: &[u8], header: usize, expected: usize) -> Result<()> {
    let actual = bytes.len() - header;
    if actual != expected {
        return Err(Error::CorruptFile(format!(
            "header declares {expected} payload bytes, file has {actual}"
        )));
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<ImageSet> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let count = read_u32(bytes, 4, "image count")? as usize;
    let rows = read_u32(bytes, 8, "row count")? as usize;
    let cols = read_u32(bytes, 12, "column count")? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Format(format!("degenerate image size {rows}x{cols}")));
    }
    let plane = rows
        .checked_mul(cols)
        .and_then(|p| p.checked_mul(count).map(|_| p))
        .ok_or_else(|| Error::CorruptFile("declared dimensions overflow".into()))?;
    check_payload(bytes, 16, plane * count)?;
    let images = bytes[16..]
        .chunks_exact(plane)
        .map(|px| {
            Tensor::new(
                &[1, rows, cols],
                px.iter().map(|&b| b as f32 / 255.0).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ImageSet { rows, cols, images })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABELS_MAGIC)?;
    let count = read_u32(bytes, 4, "label count")? as usize;
    check_payload(bytes, 8, count)?;
    Ok(bytes[8..].to_vec())
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<ImageSet> {
    parse_idx_images(&fs::read(path)?)
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    parse_idx_labels(&fs::read(path)?)
}

/// Serialises `u8` images (all the same size) as an IDX image file.
pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len() * rows * cols);
    out.extend(IMAGES_MAGIC.to_be_bytes());
    out.extend((pixels.len() as u32).to_be_bytes());
    out.extend((rows as u32).to_be_bytes());
    out.extend((cols as u32).to_be_bytes());
    for p in pixels {
        out.extend_from_slice(p);
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend(LABELS_MAGIC.to_be_bytes());
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
