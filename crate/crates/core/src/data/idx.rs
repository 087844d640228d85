//! IDX container parsing (big-endian header, unsigned byte payload).

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::engine::Tensor;
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            Error::Format(format!(
                "{what}: header truncated (expected at least {} bytes, got {})",
                at + 4,
                bytes.len()
            ))
        })
}

fn check_magic(bytes: &[u8], expected: u32, what: &str) -> Result<()> {
    let magic = be_u32(bytes, 0, what)?;
    if magic != expected {
        return Err(Error::Format(format!(
            "{what}: bad IDX magic 0x{magic:08x}, expected 0x{expected:08x}"
        )));
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], header: usize, len: usize, what: &str) -> Result<&'a [u8]> {
    let expected = header + len;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{what}: expected {expected} bytes, got {}",
            bytes.len()
        )));
    }
    Ok(&bytes[header..])
}

/// Parses an image file into `[n, rows, cols]` pixels scaled to `[0, 1]`.
pub fn parse_images(bytes: &[u8]) -> Result<Tensor> {
    let what = "IDX images";
    check_magic(bytes, IMAGES_MAGIC, what)?;
    let n = be_u32(bytes, 4, what)? as usize;
    let rows = be_u32(bytes, 8, what)? as usize;
    let cols = be_u32(bytes, 12, what)? as usize;
    let pixels = payload(bytes, 16, n * rows * cols, what)?;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Format(format!("{what}: empty extent {n}x{rows}x{cols}")));
    }
    Tensor::new(&[n, rows, cols], pixels.iter().map(|&p| f64::from(p) / 255.0).collect())
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let what = "IDX labels";
    check_magic(bytes, LABELS_MAGIC, what)?;
    let n = be_u32(bytes, 4, what)? as usize;
    Ok(payload(bytes, 8, n, what)?.to_vec())
}

/// Serializes `[n, rows, cols]` pixels in `[0, 1]` (rounded to bytes).
pub fn encode_images(images: &Tensor) -> Vec<u8> {
    let s = images.shape();
    let mut out = Vec::with_capacity(16 + images.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for &d in s {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend(images.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

/// Loaded images, labels and a SHA-256 over both files' bytes.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<(Tensor, Vec<u8>, String)> {
    let img = read(images_path)?;
    let lab = read(labels_path)?;
    let images = parse_images(&img)?;
    let labels = parse_labels(&lab)?;
    if labels.len() != images.shape()[0] {
        return Err(Error::Format(format!(
            "{} images but {} labels",
            images.shape()[0],
            labels.len()
        )));
    }
    let mut h = Sha256::new();
    h.update(&img);
    h.update(&lab);
    let digest = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    Ok((images, labels, digest))
}
