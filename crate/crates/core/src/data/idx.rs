//! IDX container (the MNIST distribution format). Gzip-compressed files are
//! detected by their magic bytes and inflated before parsing.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::{Dataset, Split, PIXELS, SIDE};
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(offset as u64, "truncated header"))
}

/// Returns `(count, rows, cols, pixel bytes)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(
            0,
            format!("image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated image data: {} of {need} bytes", body.len()),
        ));
    }
    Ok((n, rows, cols, &body[..need]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(
            0,
            format!("label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated label data: {} of {n} bytes", body.len()),
        ));
    }
    Ok(&body[..n])
}

/// Load an (images, labels) IDX pair, scaling pixels by 1/255.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    load_idx_as(images_path, labels_path, Split::Train)
}

pub(crate) fn load_idx_as(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    split: Split,
) -> Result<Dataset> {
    let img_bytes = read_maybe_gz(images_path.as_ref())?;
    let lab_bytes = read_maybe_gz(labels_path.as_ref())?;
    let (n, rows, cols, pixels) = parse_idx_images(&img_bytes)?;
    if rows != SIDE || cols != SIDE {
        return Err(Error::format(8, format!("image shape {rows}x{cols}, expected 28x28")));
    }
    let labels = parse_idx_labels(&lab_bytes)?;
    if labels.len() != n {
        return Err(Error::format(
            4,
            format!("{n} images but {} labels", labels.len()),
        ));
    }
    if let Some(pos) = labels.iter().position(|&l| l > 9) {
        return Err(Error::format(8 + pos as u64, format!("label {} > 9", labels[pos])));
    }
    let images = pixels.iter().map(|&b| f32::from(b) / 255.0).collect();
    Dataset::new(images, labels.to_vec(), split)
}

/// Write `ds` as an uncompressed IDX pair. Pixels are rounded to the
/// nearest 1/255 step.
pub fn write_idx(ds: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let n = ds.len() as u32;
    let mut img = Vec::with_capacity(16 + ds.len() * PIXELS);
    img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&n.to_be_bytes());
    img.extend_from_slice(&(SIDE as u32).to_be_bytes());
    img.extend_from_slice(&(SIDE as u32).to_be_bytes());
    img.extend(ds.pixels().iter().map(|&p| (p * 255.0).round() as u8));
    fs::write(images_path, img)?;

    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&n.to_be_bytes());
    lab.extend_from_slice(ds.labels());
    fs::write(labels_path, lab)?;
    Ok(())
}
