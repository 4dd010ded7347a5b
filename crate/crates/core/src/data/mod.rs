//! Datasets of 28×28 ten-class images: IDX ingestion, a procedural
//! fallback, device partitioning and lossy compression levels.

mod compress;
mod idx;
mod partition;
mod synth;

pub use compress::{
    build_accuracy_table, compress_image, default_ladder, read_accuracy_csv, write_accuracy_csv,
    CompressionLevel,
};
pub use idx::{load_idx, parse_idx_images, parse_idx_labels, write_idx};
pub use partition::{partition, Partition, PartitionMode};
pub use synth::synth_dataset;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SIDE: usize = 28;
pub const PIXELS: usize = SIDE * SIDE;
pub const CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Row-major `n × 784` pixel intensities in `[0, 1]` with labels in `0..10`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f32>,
    labels: Vec<u8>,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Vec<f32>, labels: Vec<u8>, split: Split) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::param("dataset must be non-empty"));
        }
        if images.len() != labels.len() * PIXELS {
            return Err(Error::param(format!(
                "{} pixels for {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(p) = images.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::param(format!("pixel {p} outside [0,1]")));
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= CLASSES) {
            return Err(Error::param(format!("label {l} outside 0..10")));
        }
        Ok(Self {
            images,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * PIXELS..(i + 1) * PIXELS]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.images
    }

    /// Copy of the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Dataset> {
        let mut images = Vec::with_capacity(indices.len() * PIXELS);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(images, labels, split)
    }

    /// Contiguous range `[start, end)` as its own dataset.
    pub fn slice(&self, start: usize, end: usize, split: Split) -> Result<Dataset> {
        let idx: Vec<usize> = (start..end).collect();
        self.subset(&idx, split)
    }

    /// Per-label counts.
    pub fn histogram(&self) -> [usize; CLASSES] {
        let mut h = [0; CLASSES];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

/// A dataset assembled from individual (image, label) pairs, e.g. after
/// compression at the uploading device.
#[derive(Debug, Clone, Default)]
pub struct SampleBuffer {
    images: Vec<f32>,
    labels: Vec<u8>,
}

impl SampleBuffer {
    pub fn push(&mut self, image: &[f32], label: u8) {
        debug_assert_eq!(image.len(), PIXELS);
        self.images.extend_from_slice(image);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn to_dataset(&self, split: Split) -> Result<Dataset> {
        Dataset::new(self.images.clone(), self.labels.clone(), split)
    }
}
