//! Centralized training fed by device uploads over a shared channel, with
//! loss-based filtering and importance-graded compression.

use serde::{Deserialize, Serialize};

use crate::data::{compress_image, default_ladder, partition, CompressionLevel, PartitionMode, SampleBuffer, Split};
use crate::error::{Error, Result};
use crate::nn::{batch_matrix, init_model, train_epoch, Model, SgdConfig};
use crate::rng::{derive_stream, StreamId};

use super::run::FlData;

/// Indices of the `ceil(q·n)` largest losses, largest first; equal losses
/// keep index order.
pub fn importance_filter(losses: &[f64], quota: f64) -> Result<Vec<usize>> {
    if losses.is_empty() {
        return Err(Error::param("importance_filter needs at least one loss"));
    }
    if !(quota > 0.0 && quota <= 1.0) {
        return Err(Error::param(format!("quota {quota} outside (0, 1]")));
    }
    let keep = ((quota * losses.len() as f64).ceil() as usize).clamp(1, losses.len());
    let mut order = rank_descending(losses);
    order.truncate(keep);
    Ok(order)
}

fn rank_descending(losses: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
    order
}

/// Level id per sample: loss-descending quantile bins map onto the ladder,
/// so the most important samples travel least compressed.
pub fn assign_upload_compression(losses: &[f64], ladder: &[CompressionLevel]) -> Vec<usize> {
    let n = losses.len();
    let mut levels = vec![0; n];
    for (rank, i) in rank_descending(losses).into_iter().enumerate() {
        levels[i] = ladder[rank * ladder.len() / n].level_id;
    }
    levels
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CentralConfig {
    pub n_devices: usize,
    /// Uplink bandwidth shared by all devices.
    pub bandwidth_hz: f64,
    pub eta: f64,
    pub delay_budget_s: f64,
    /// Fraction of each scored pool that is uploaded.
    pub quota: f64,
    /// Not-yet-uploaded samples each device scores per cycle.
    pub pool_size: usize,
    /// Loss filtering (otherwise a uniform random pick of the same size).
    pub filter: bool,
    /// Graded compression (otherwise everything goes lossless).
    pub compress: bool,
    pub server_epochs: usize,
    pub sgd: SgdConfig,
    pub partition: PartitionMode,
    pub seed: u64,
}

impl Default for CentralConfig {
    fn default() -> Self {
        Self {
            n_devices: 20,
            bandwidth_hz: 200e3,
            eta: 1.0,
            delay_budget_s: 50.0,
            quota: 0.4,
            pool_size: 25,
            filter: true,
            compress: true,
            server_epochs: 1,
            sgd: SgdConfig::default(),
            partition: PartitionMode::Iid,
            seed: 1,
        }
    }
}

impl CentralConfig {
    /// Random selection, lossless uploads.
    pub fn baseline(&self) -> Self {
        Self {
            filter: false,
            compress: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_devices == 0 || self.pool_size == 0 || self.server_epochs == 0 {
            return Err(Error::param("n_devices, pool_size and server_epochs must be >= 1"));
        }
        if !(self.bandwidth_hz > 0.0) || !(self.eta > 0.0) || !(self.delay_budget_s >= 0.0) {
            return Err(Error::param("need bandwidth > 0, eta > 0, budget >= 0"));
        }
        if !(self.quota > 0.0 && self.quota <= 1.0) {
            return Err(Error::param(format!("quota {} outside (0, 1]", self.quota)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: usize,
    pub uploaded: usize,
    pub bits: u64,
    pub cum_delay_s: f64,
    pub received_total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentralRun {
    pub cycles: Vec<CycleRecord>,
    /// `(training index, level id)` of every completed upload, in order.
    pub received: Vec<(usize, usize)>,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub level_usage: Vec<usize>,
}

/// Upload-limited centralized training. Each cycle, every device scores
/// its next pool under the current server model, keeps a quota, and the
/// picks are uploaded round-robin until the budget runs out; the server then
/// trains on everything received so far.
pub fn run_centralized(config: &CentralConfig, data: &FlData) -> Result<CentralRun> {
    config.validate()?;
    let seed = config.seed;
    let ladder = default_ladder();
    let part = partition(&data.train, config.n_devices, config.partition, seed)?;
    let mut queues: Vec<Vec<usize>> = part
        .assignment
        .iter()
        .enumerate()
        .map(|(d, idx)| {
            let mut order = idx.clone();
            derive_stream(seed, StreamId::new("central", d as u64, "order")).shuffle(&mut order);
            order.reverse();
            order
        })
        .collect();

    let mut model: Model = init_model(seed);
    let initial_accuracy = model.evaluate(&data.test);
    let mut buffer = SampleBuffer::default();
    let mut received = Vec::new();
    let mut level_usage = vec![0; ladder.len()];
    let mut cycles = Vec::new();
    let mut elapsed = 0.0f64;
    let mut budget_hit = false;

    for cycle in 0.. {
        let mut picks: Vec<Vec<(usize, usize)>> = Vec::with_capacity(queues.len());
        for (d, queue) in queues.iter_mut().enumerate() {
            let take = config.pool_size.min(queue.len());
            let pool: Vec<usize> = queue.split_off(queue.len() - take).into_iter().rev().collect();
            if pool.is_empty() {
                picks.push(Vec::new());
                continue;
            }
            let keep = ((config.quota * pool.len() as f64).ceil() as usize).clamp(1, pool.len());
            let chosen: Vec<usize> = if config.filter {
                let x = batch_matrix(&data.train, &pool);
                let labels: Vec<u8> = pool.iter().map(|&i| data.train.label(i)).collect();
                let losses = model.per_sample_loss(x.view(), &labels);
                importance_filter(&losses, config.quota)?
            } else {
                let mut rng = derive_stream(seed, StreamId::new("central", (cycle as u64) << 16 | d as u64, "pick"));
                rng.choose(pool.len(), keep)
            };
            let levels = if config.compress {
                let x = batch_matrix(&data.train, &chosen.iter().map(|&j| pool[j]).collect::<Vec<_>>());
                let labels: Vec<u8> = chosen.iter().map(|&j| data.train.label(pool[j])).collect();
                assign_upload_compression(&model.per_sample_loss(x.view(), &labels), &ladder)
            } else {
                vec![0; chosen.len()]
            };
            picks.push(chosen.iter().zip(levels).map(|(&j, l)| (pool[j], l)).collect());
        }
        if picks.iter().all(Vec::is_empty) {
            break;
        }

        let mut uploaded = 0;
        let mut bits = 0u64;
        let longest = picks.iter().map(Vec::len).max().unwrap_or(0);
        'upload: for slot in 0..longest {
            for device in &picks {
                let Some(&(sample, level)) = device.get(slot) else { continue };
                let payload = ladder[level].payload_bits();
                let cost = payload as f64 / (config.bandwidth_hz * config.eta);
                if elapsed + cost > config.delay_budget_s {
                    budget_hit = true;
                    break 'upload;
                }
                elapsed += cost;
                buffer.push(&compress_image(data.train.image(sample), &ladder[level]), data.train.label(sample));
                received.push((sample, level));
                level_usage[level] += 1;
                uploaded += 1;
                bits += payload;
            }
        }
        if !buffer.is_empty() && uploaded > 0 {
            let ds = buffer.to_dataset(Split::Train)?;
            let idx: Vec<usize> = (0..ds.len()).collect();
            for e in 0..config.server_epochs {
                let mut rng = derive_stream(seed, StreamId::new("central", (cycle as u64) << 16 | e as u64, "train"));
                train_epoch(&mut model, &ds, &idx, config.sgd, &mut rng)?;
            }
        }
        cycles.push(CycleRecord {
            cycle,
            uploaded,
            bits,
            cum_delay_s: elapsed,
            received_total: received.len(),
        });
        if budget_hit {
            break;
        }
    }

    Ok(CentralRun {
        final_accuracy: if received.is_empty() {
            initial_accuracy
        } else {
            model.evaluate(&data.test)
        },
        cycles,
        received,
        initial_accuracy,
        level_usage,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use crate::rng::RngStream;

    #[test]
    fn filter_examples() {
        assert_eq!(importance_filter(&[0.1, 5.0, 0.2], 1.0 / 3.0).unwrap(), vec![1]);
        let mut all = importance_filter(&[3.0, 1.0, 2.0, 2.0], 1.0).unwrap();
        assert_eq!(all, vec![0, 2, 3, 1]);
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(importance_filter(&[], 0.5).is_err());
        assert!(importance_filter(&[1.0], 0.0).is_err());
    }

    #[test]
    fn filter_keeps_the_heavier_half() {
        let mut rng = derive_stream(5, StreamId::new("t", 0, "l"));
        for _ in 0..200 {
            let n = 1 + rng.below(40) as usize;
            let losses: Vec<f64> = (0..n).map(|_| (rng.next_f64() * 4.0).round() / 2.0).collect();
            let q = rng.uniform(0.05, 1.0);
            let sel = importance_filter(&losses, q).unwrap();
            let rest: Vec<f64> = (0..n).filter(|i| !sel.contains(i)).map(|i| losses[i]).collect();
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let sel_l: Vec<f64> = sel.iter().map(|&i| losses[i]).collect();
            if !rest.is_empty() {
                assert!(mean(&sel_l) >= mean(&rest));
            }
        }
    }

    #[test]
    fn compression_examples() {
        let ladder = default_ladder();
        assert_eq!(assign_upload_compression(&[1.0; 5], &ladder), vec![0, 1, 2, 3, 4]);
        assert_eq!(assign_upload_compression(&[0.3, 0.9, 0.1, 0.5, 0.7], &ladder), vec![3, 0, 4, 2, 1]);
    }

    fn monotone(losses: &[f64], levels: &[usize]) -> bool {
        (0..losses.len()).all(|a| (0..losses.len()).all(|b| losses[a] < losses[b] || levels[a] <= levels[b]))
    }

    #[test]
    fn compression_monotone_random() {
        let ladder = default_ladder();
        let mut rng: RngStream = derive_stream(6, StreamId::new("t", 0, "l"));
        for _ in 0..1000 {
            let n = 1 + rng.below(30) as usize;
            let losses: Vec<f64> = (0..n).map(|_| rng.next_f64() * 6.0).collect();
            assert!(monotone(&losses, &assign_upload_compression(&losses, &ladder)));
        }
    }

    fn data() -> FlData {
        FlData {
            train: synth_dataset(400, 21).unwrap(),
            validation: synth_dataset(100, 22).unwrap(),
            test: synth_dataset(200, 23).unwrap(),
        }
    }

    #[test]
    fn zero_budget_keeps_initial_model() {
        let cfg = CentralConfig {
            delay_budget_s: 0.0,
            ..CentralConfig::default()
        };
        let run = run_centralized(&cfg, &data()).unwrap();
        assert!(run.received.is_empty());
        assert_eq!(run.final_accuracy, run.initial_accuracy);
    }

    #[test]
    fn budget_caps_uploaded_bits() {
        let cfg = CentralConfig {
            delay_budget_s: 1.0,
            ..CentralConfig::default()
        };
        let run = run_centralized(&cfg, &data()).unwrap();
        let bits: u64 = run.cycles.iter().map(|c| c.bits).sum();
        assert!(bits as f64 <= cfg.bandwidth_hz * cfg.eta * 1.0 + 1e-6);
        assert!(run.cycles.last().unwrap().cum_delay_s <= 1.0);
        assert!(!run.received.is_empty());
    }

    #[test]
    fn baseline_is_lossless() {
        let cfg = CentralConfig::default().baseline();
        let run = run_centralized(&cfg, &data()).unwrap();
        assert!(run.received.iter().all(|&(_, l)| l == 0));
        assert_eq!(run.level_usage[1..].iter().sum::<usize>(), 0);
    }
}
