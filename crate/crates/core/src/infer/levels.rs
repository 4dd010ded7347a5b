use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{compress_image, CompressionLevel, Dataset, PIXELS};
use crate::error::{Error, Result};
use crate::nn::Model;

/// Slotted uplink: one packet of `capacity_bits` per slot, each packet lost
/// independently with `packet_loss_p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelModel {
    pub capacity_bits: u64,
    pub packet_loss_p: f64,
}

impl Default for ChannelModel {
    fn default() -> Self {
        Self {
            capacity_bits: 1600,
            packet_loss_p: 0.0,
        }
    }
}

impl ChannelModel {
    pub fn validate(&self) -> Result<()> {
        if self.capacity_bits == 0 {
            return Err(Error::param("channel capacity must be > 0 bits per slot"));
        }
        if !(0.0..=1.0).contains(&self.packet_loss_p) {
            return Err(Error::param(format!("packet loss {} outside [0, 1]", self.packet_loss_p)));
        }
        Ok(())
    }
}

/// `ceil(payload_bits / C)`.
pub fn slots_for(level: &CompressionLevel, capacity_bits: u64) -> Result<u32> {
    if capacity_bits == 0 {
        return Err(Error::param("channel capacity must be > 0 bits per slot"));
    }
    Ok(level.payload_bits().div_ceil(capacity_bits) as u32)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelInfo {
    pub level_id: usize,
    pub slots: u32,
    pub accuracy: f64,
}

/// The ladder as the schedulers see it: slot cost and expected reward per
/// level, indexed by level id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelTable {
    pub levels: Vec<LevelInfo>,
}

impl LevelTable {
    pub fn new(ladder: &[CompressionLevel], capacity_bits: u64) -> Result<Self> {
        if ladder.is_empty() {
            return Err(Error::param("empty compression ladder"));
        }
        let levels = ladder
            .iter()
            .enumerate()
            .map(|(i, l)| {
                if l.level_id != i {
                    return Err(Error::param(format!("ladder position {i} holds level {}", l.level_id)));
                }
                let accuracy = l
                    .accuracy
                    .ok_or_else(|| Error::param(format!("level {} has no accuracy; build the table first", i)))?;
                Ok(LevelInfo {
                    level_id: i,
                    slots: slots_for(l, capacity_bits)?,
                    accuracy,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { levels })
    }

    /// Direct construction from `(slots, accuracy)` pairs.
    pub fn from_pairs(pairs: &[(u32, f64)]) -> Result<Self> {
        if pairs.is_empty() || pairs.iter().any(|&(s, a)| s == 0 || !(0.0..=1.0).contains(&a)) {
            return Err(Error::param("levels need slots >= 1 and accuracy in [0, 1]"));
        }
        Ok(Self {
            levels: pairs
                .iter()
                .enumerate()
                .map(|(level_id, &(slots, accuracy))| LevelInfo {
                    level_id,
                    slots,
                    accuracy,
                })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn slots(&self, level: usize) -> u32 {
        self.levels[level].slots
    }

    pub fn accuracy(&self, level: usize) -> f64 {
        self.levels[level].accuracy
    }

    /// Fewest slots any level needs.
    pub fn min_slots(&self) -> u32 {
        self.levels.iter().map(|l| l.slots).min().unwrap_or(1)
    }

    pub fn max_slots(&self) -> u32 {
        self.levels.iter().map(|l| l.slots).max().unwrap_or(1)
    }

    /// Levels that fit in `remaining` slots.
    pub fn feasible(&self, remaining: u32) -> impl Iterator<Item = &LevelInfo> {
        self.levels.iter().filter(move |l| l.slots <= remaining)
    }

    /// Highest-accuracy level that fits; ties go to fewer slots, then the
    /// lower id.
    pub fn best_fit(&self, remaining: u32) -> Option<usize> {
        self.feasible(remaining)
            .min_by(|a, b| {
                b.accuracy
                    .total_cmp(&a.accuracy)
                    .then(a.slots.cmp(&b.slots))
                    .then(a.level_id.cmp(&b.level_id))
            })
            .map(|l| l.level_id)
    }

    /// For every distinct slot count, the most accurate level using it.
    /// Other levels are dominated when only expected reward matters.
    pub fn undominated(&self) -> Vec<usize> {
        let mut best: Vec<usize> = Vec::new();
        for l in &self.levels {
            match best.iter_mut().find(|&&mut b| self.levels[b].slots == l.slots) {
                Some(b) if self.levels[*b].accuracy < l.accuracy => *b = l.level_id,
                Some(_) => {}
                None => best.push(l.level_id),
            }
        }
        best.sort_by_key(|&b| (self.levels[b].slots, b));
        best
    }

    /// Hex SHA-256 over `(id, slots, accuracy bits)` of every level.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.levels {
            h.update((l.level_id as u64).to_le_bytes());
            h.update(l.slots.to_le_bytes());
            h.update(l.accuracy.to_bits().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Classifier output for every test sample at every level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelPredictions {
    by_level: Vec<Vec<(u8, f32)>>,
    labels: Vec<u8>,
}

/// What the server learns from one completed transmission.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outcome {
    pub correct: bool,
    pub uncertainty: f64,
}

impl LevelPredictions {
    pub fn build(model: &Model, test: &Dataset, ladder: &[CompressionLevel]) -> Result<Self> {
        const CHUNK: usize = 512;
        let mut by_level = Vec::with_capacity(ladder.len());
        for level in ladder {
            let mut preds = Vec::with_capacity(test.len());
            for start in (0..test.len()).step_by(CHUNK) {
                let end = (start + CHUNK).min(test.len());
                let mut x = ndarray::Array2::<f64>::zeros((end - start, PIXELS));
                for (r, i) in (start..end).enumerate() {
                    let img = compress_image(test.image(i), level);
                    for (dst, &v) in x.row_mut(r).iter_mut().zip(&img) {
                        *dst = f64::from(v);
                    }
                }
                preds.extend(model.predict(x.view()).into_iter().map(|(c, u)| (c as u8, u as f32)));
            }
            by_level.push(preds);
        }
        Ok(Self {
            by_level,
            labels: test.labels().to_vec(),
        })
    }

    /// From explicit `(predicted class, uncertainty)` rows per level.
    pub fn from_parts(by_level: Vec<Vec<(u8, f32)>>, labels: Vec<u8>) -> Result<Self> {
        if by_level.iter().any(|p| p.len() != labels.len()) {
            return Err(Error::param("prediction rows must match the label count"));
        }
        Ok(Self { by_level, labels })
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_levels(&self) -> usize {
        self.by_level.len()
    }

    pub fn outcome(&self, level: usize, sample: usize) -> Outcome {
        let (class, u) = self.by_level[level][sample];
        Outcome {
            correct: class == self.labels[sample],
            uncertainty: f64::from(u),
        }
    }

    /// Fraction correct at `level`.
    pub fn accuracy(&self, level: usize) -> f64 {
        let hits = (0..self.labels.len()).filter(|&i| self.outcome(level, i).correct).count();
        hits as f64 / self.labels.len() as f64
    }
}
