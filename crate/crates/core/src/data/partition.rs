use serde::{Deserialize, Serialize};

use super::{Dataset, CLASSES};
use crate::error::{Error, Result};
use crate::rng::{derive_stream, StreamId};

/// How samples are spread over devices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PartitionMode {
    Iid,
    /// Sort by label, cut into `n_devices · k` single-label shards, deal `k`
    /// shards to each device.
    Shards(usize),
}

impl std::fmt::Display for PartitionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PartitionMode::Iid => write!(f, "iid"),
            PartitionMode::Shards(k) => write!(f, "shards:{k}"),
        }
    }
}

impl From<PartitionMode> for String {
    fn from(mode: PartitionMode) -> String {
        mode.to_string()
    }
}

impl TryFrom<String> for PartitionMode {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl std::str::FromStr for PartitionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid" => Ok(PartitionMode::Iid),
            _ => {
                let k = s
                    .strip_prefix("shards:")
                    .or_else(|| s.strip_prefix("shards"))
                    .and_then(|k| k.trim_matches(|c| c == '(' || c == ')').parse().ok())
                    .ok_or_else(|| Error::param(format!("unknown partition mode {s:?}")))?;
                Ok(PartitionMode::Shards(k))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub assignment: Vec<Vec<usize>>,
    pub mode: PartitionMode,
}

impl Partition {
    pub fn n_devices(&self) -> usize {
        self.assignment.len()
    }
}

/// Split `ds` over `n_devices`. Leftover samples that do not fill an equal
/// share (iid) or a whole shard are dropped.
pub fn partition(ds: &Dataset, n_devices: usize, mode: PartitionMode, seed: u64) -> Result<Partition> {
    if n_devices == 0 {
        return Err(Error::param("n_devices must be >= 1"));
    }
    let mut rng = derive_stream(seed, StreamId::new("partition", n_devices as u64, "shuffle"));
    let n = ds.len();
    let assignment = match mode {
        PartitionMode::Iid => {
            let per = n / n_devices;
            if per == 0 {
                return Err(Error::param(format!("{n} samples cannot cover {n_devices} devices")));
            }
            let mut idx: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut idx);
            idx.chunks_exact(per).take(n_devices).map(<[usize]>::to_vec).collect()
        }
        PartitionMode::Shards(k) => {
            if k == 0 {
                return Err(Error::param("shards(k) needs k >= 1"));
            }
            let n_shards = n_devices * k;
            let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); CLASSES];
            for i in 0..n {
                by_label[ds.label(i) as usize].push(i);
            }
            let counts = shards_per_label(&by_label, n_shards);
            let mut shards = Vec::with_capacity(n_shards);
            for (samples, &c) in by_label.iter().zip(&counts) {
                if c == 0 {
                    continue;
                }
                let size = samples.len() / c;
                if size == 0 {
                    return Err(Error::param(format!(
                        "{n_shards} shards exceed the {n} available samples"
                    )));
                }
                shards.extend(samples.chunks_exact(size).take(c).map(<[usize]>::to_vec));
            }
            if shards.len() < n_shards {
                return Err(Error::param(format!(
                    "only {} shards available, {n_shards} requested",
                    shards.len()
                )));
            }
            rng.shuffle(&mut shards);
            shards.chunks_exact(k).map(|group| group.concat()).collect()
        }
    };
    Ok(Partition { assignment, mode })
}

/// Largest-remainder apportionment of `total` shards over labels by size.
fn shards_per_label(by_label: &[Vec<usize>], total: usize) -> Vec<usize> {
    let n: usize = by_label.iter().map(Vec::len).sum();
    if n == 0 {
        return vec![0; by_label.len()];
    }
    let quotas: Vec<f64> = by_label
        .iter()
        .map(|v| v.len() as f64 * total as f64 / n as f64)
        .collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = total - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}
