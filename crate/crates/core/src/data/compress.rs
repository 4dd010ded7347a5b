//! Lossy image compression: area-average downsampling, uniform quantization
//! and nearest-neighbour upsampling back to 28×28.
//!
//! Downsampling bins each source pixel into exactly one target cell (the
//! cell nearest-neighbour upsampling would copy back into it), so the
//! round trip is a projection and compressing twice equals compressing once.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, PIXELS, SIDE};
use crate::error::{Error, Result};
use crate::nn::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionLevel {
    pub level_id: usize,
    pub width: usize,
    pub height: usize,
    pub bit_depth: u32,
    /// Validation accuracy of the classifier on images at this level.
    pub accuracy: Option<f64>,
}

impl CompressionLevel {
    pub fn new(level_id: usize, width: usize, height: usize, bit_depth: u32) -> Self {
        Self {
            level_id,
            width,
            height,
            bit_depth,
            accuracy: None,
        }
    }

    pub fn payload_bits(&self) -> u64 {
        (self.width * self.height) as u64 * u64::from(self.bit_depth)
    }

    pub fn is_lossless(&self) -> bool {
        self.width == SIDE && self.height == SIDE && self.bit_depth >= 8
    }
}

/// L0 28×28×8, L1 20×20×8, L2 14×14×8, L3 10×10×6, L4 7×7×4.
pub fn default_ladder() -> Vec<CompressionLevel> {
    [(28, 8), (20, 8), (14, 8), (10, 6), (7, 4)]
        .into_iter()
        .enumerate()
        .map(|(id, (side, bits))| CompressionLevel::new(id, side, side, bits))
        .collect()
}

#[inline]
fn bin(i: usize, cells: usize) -> usize {
    i * cells / SIDE
}

pub fn compress_image(img: &[f32], level: &CompressionLevel) -> Vec<f32> {
    assert_eq!(img.len(), PIXELS, "image must be 28x28");
    if level.is_lossless() {
        return img.to_vec();
    }
    let (w, h) = (level.width, level.height);
    let mut sums = vec![0.0f64; w * h];
    let mut counts = vec![0u32; w * h];
    for r in 0..SIDE {
        let br = bin(r, h);
        for c in 0..SIDE {
            let cell = br * w + bin(c, w);
            sums[cell] += f64::from(img[r * SIDE + c]);
            counts[cell] += 1;
        }
    }
    let steps = f64::from((1u32 << level.bit_depth) - 1);
    let cells: Vec<f32> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &n)| {
            let mean = s / f64::from(n);
            ((mean * steps).round() / steps) as f32
        })
        .collect();
    let mut out = vec![0.0f32; PIXELS];
    for r in 0..SIDE {
        let br = bin(r, h);
        for c in 0..SIDE {
            out[r * SIDE + c] = cells[br * w + bin(c, w)];
        }
    }
    out
}

/// Compress every image in `ds` at `level`.
pub(crate) fn compress_dataset(ds: &Dataset, level: &CompressionLevel) -> Result<Dataset> {
    let mut images = Vec::with_capacity(ds.len() * PIXELS);
    for i in 0..ds.len() {
        images.extend(compress_image(ds.image(i), level));
    }
    Dataset::new(images, ds.labels().to_vec(), ds.split)
}

/// Fill each level's accuracy with the classifier's validation accuracy on
/// images compressed at that level.
pub fn build_accuracy_table(
    model: &Model,
    validation: &Dataset,
    ladder: &[CompressionLevel],
) -> Result<Vec<CompressionLevel>> {
    let mut out = Vec::with_capacity(ladder.len());
    for level in ladder {
        let compressed = compress_dataset(validation, level)?;
        let mut l = level.clone();
        l.accuracy = Some(model.evaluate(&compressed));
        out.push(l);
    }
    let base = out.first().and_then(|l| l.accuracy).unwrap_or(0.0);
    if base < 0.5 {
        return Err(Error::Calibration(format!(
            "lossless validation accuracy {base:.3} < 0.5; model looks untrained"
        )));
    }
    let n = validation.len() as f64;
    for pair in out.windows(2) {
        let (a, b) = (pair[0].accuracy.unwrap(), pair[1].accuracy.unwrap());
        // Allow 3 sigma of sampling noise on the difference.
        let sd = ((a * (1.0 - a) + b * (1.0 - b)) / n).sqrt();
        if b > a + 3.0 * sd {
            return Err(Error::Calibration(format!(
                "accuracy rises from level {} ({a:.4}) to level {} ({b:.4})",
                pair[0].level_id, pair[1].level_id
            )));
        }
    }
    Ok(out)
}

const CSV_HEADER: &str = "level_id,width,height,bit_depth,payload_bits,accuracy";

pub fn write_accuracy_csv(path: impl AsRef<Path>, ladder: &[CompressionLevel]) -> Result<()> {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for l in ladder {
        let acc = l.accuracy.map(|a| a.to_string()).unwrap_or_default();
        writeln!(
            s,
            "{},{},{},{},{},{}",
            l.level_id,
            l.width,
            l.height,
            l.bit_depth,
            l.payload_bits(),
            acc
        )
        .unwrap();
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_accuracy_csv(path: impl AsRef<Path>) -> Result<Vec<CompressionLevel>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(Error::format(0, "accuracy table header mismatch"));
    }
    let mut out = Vec::new();
    let mut offset = CSV_HEADER.len() as u64 + 1;
    for line in lines {
        let bad = |what: &str| Error::format(offset, format!("bad {what} in {line:?}"));
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            return Err(bad("field count"));
        }
        let mut level = CompressionLevel::new(
            f[0].parse().map_err(|_| bad("level_id"))?,
            f[1].parse().map_err(|_| bad("width"))?,
            f[2].parse().map_err(|_| bad("height"))?,
            f[3].parse().map_err(|_| bad("bit_depth"))?,
        );
        let payload: u64 = f[4].parse().map_err(|_| bad("payload_bits"))?;
        if payload != level.payload_bits() {
            return Err(bad("payload_bits"));
        }
        if !f[5].is_empty() {
            level.accuracy = Some(f[5].parse().map_err(|_| bad("accuracy"))?);
        }
        out.push(level);
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}
