//! Big-endian IDX files as used by MNIST.

use std::path::Path;

use super::read_file;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::netgraph::Batch;
use crate::scalar::Real;

/// Unsigned-byte data, three dimensions.
pub const IMAGE_MAGIC: u32 = 0x0000_0803;
/// Unsigned-byte data, one dimension.
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Raw contents of an image file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(what, bytes.len() as u64, format!("truncated header, need {} bytes", at + 4)))
}

fn check_magic(bytes: &[u8], want: u32, what: &str) -> Result<()> {
    let got = be_u32(bytes, 0, what)?;
    if got != want {
        return Err(Error::format(what, 0, format!("bad magic 0x{got:08x}, expected 0x{want:08x}")));
    }
    Ok(())
}

fn check_body(bytes: &[u8], header: usize, body: usize, what: &str) -> Result<()> {
    let want = header as u64 + body as u64;
    let got = bytes.len() as u64;
    if got < want {
        return Err(Error::format(what, got, format!("truncated data, expected {want} bytes")));
    }
    if got > want {
        return Err(Error::format(what, want, format!("{} trailing bytes", got - want)));
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let what = "IDX images";
    check_magic(bytes, IMAGE_MAGIC, what)?;
    let count = be_u32(bytes, 4, what)? as usize;
    let rows = be_u32(bytes, 8, what)? as usize;
    let cols = be_u32(bytes, 12, what)? as usize;
    let body = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::format(what, 4, "image dimensions overflow"))?;
    check_body(bytes, 16, body, what)?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let what = "IDX labels";
    check_magic(bytes, LABEL_MAGIC, what)?;
    let count = be_u32(bytes, 4, what)? as usize;
    check_body(bytes, 8, count, what)?;
    Ok(bytes[8..].to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IMAGE_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Images scaled to `[0, 1]`, one flattened row-major image per row.
pub fn load_idx<T: Real>(images: &Path, labels: &Path) -> Result<Batch<T>> {
    let img = parse_idx_images(&read_file(images)?)
        .map_err(|e| with_path(e, images))?;
    let lab = parse_idx_labels(&read_file(labels)?).map_err(|e| with_path(e, labels))?;
    if lab.len() != img.count {
        return Err(Error::InvalidArgument(format!(
            "{} holds {} images but {} holds {} labels",
            images.display(),
            img.count,
            labels.display(),
            lab.len()
        )));
    }
    let scale = T::of(1.0 / 255.0);
    let data = img.pixels.iter().map(|&p| T::of(p as f64) * scale).collect();
    let x = Matrix::from_vec(img.count, img.rows * img.cols, data)?;
    Batch::new(x, lab.into_iter().map(usize::from).collect())
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { what, offset, message } => Error::Format {
            what: format!("{what} {}", path.display()),
            offset,
            message,
        },
        other => other,
    }
}
