//! Reader and writer for the IDX container used by the MNIST distribution.
//!
//! Layout: a 4-byte big-endian magic whose low byte is the tensor rank, then
//! one big-endian `u32` per dimension, then the raw unsigned bytes.

use std::path::Path;

use ndarray::Array2;

use super::Dataset;
use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("truncated header at byte {offset}")))
}

/// Parses an image file body. Returns `(count, rows, cols, pixels)`.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"
        )));
    }
    let n = read_u32_be(bytes, 4)? as usize;
    let rows = read_u32_be(bytes, 8)? as usize;
    let cols = read_u32_be(bytes, 12)? as usize;
    let body = &bytes[16..];
    let expected = n * rows * cols;
    if body.len() != expected {
        return Err(Error::Format(format!(
            "image payload has {} bytes, header implies {expected}",
            body.len()
        )));
    }
    Ok((n, rows, cols, body))
}

pub fn parse_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format(format!(
            "label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"
        )));
    }
    let n = read_u32_be(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format(format!(
            "label payload has {} bytes, header implies {n}",
            body.len()
        )));
    }
    Ok(body)
}

/// Builds a dataset from in-memory IDX image and label buffers.
pub fn decode(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_images(image_bytes)?;
    let labels = parse_labels(label_bytes)?;
    if labels.len() != n {
        return Err(Error::Consistency(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    let images = Array2::from_shape_vec(
        (n, rows * cols),
        pixels.iter().map(|&b| f32::from(b) / 255.0).collect(),
    )
    .map_err(|e| Error::Shape(e.to_string()))?;
    Dataset::new(images, labels.to_vec())
}

/// Loads an image/label file pair.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    decode(&images, &labels)
}

pub fn encode_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len() % (rows * cols), 0, "pixel count not a multiple of image size");
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for word in [IMAGE_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&word.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
