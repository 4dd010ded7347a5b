//! Per-round delay model: shifted-exponential local compute followed by a
//! synchronized upload over a shared band split for equal finish times.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{EventQueue, Micros};
use crate::rng::{derive_stream, RngStream, StreamId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub index: usize,
    /// Deterministic part of the local compute time, seconds.
    pub mu: f64,
    /// Rate of the exponential straggler tail, per second.
    pub theta: f64,
    /// Spectral efficiency, bit/s/Hz.
    pub eta: f64,
    /// Sample indices into the training set.
    pub data: Vec<usize>,
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0) || !(self.theta > 0.0) || !(self.eta > 0.0) {
            return Err(Error::param(format!(
                "device {}: need mu >= 0, theta > 0, eta > 0",
                self.index
            )));
        }
        if self.data.is_empty() {
            return Err(Error::param(format!("device {} has no data", self.index)));
        }
        Ok(())
    }

    /// Expected compute time `mu + 1/theta`.
    pub fn mean_compute(&self) -> f64 {
        self.mu + 1.0 / self.theta
    }
}

/// `mu + Exp(theta)`.
pub fn compute_delay(profile: &DeviceProfile, rng: &mut RngStream) -> Result<f64> {
    Ok(profile.mu + rng.sample_exponential(profile.theta)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Allocation {
    pub device: usize,
    pub bandwidth_hz: f64,
    pub upload_s: f64,
}

/// Split `total_hz` so every scheduled upload of `model_bits` finishes at the
/// same instant: `b_i ∝ 1/eta_i`. This minimizes the largest upload delay.
pub fn allocate_bandwidth(
    scheduled: &[&DeviceProfile],
    total_hz: f64,
    model_bits: f64,
) -> Result<Vec<Allocation>> {
    if scheduled.is_empty() {
        return Err(Error::param("no devices scheduled"));
    }
    if !(total_hz > 0.0) {
        return Err(Error::param(format!("bandwidth {total_hz} must be > 0")));
    }
    let inv_sum: f64 = scheduled.iter().map(|p| 1.0 / p.eta).sum();
    let common = model_bits * inv_sum / total_hz;
    Ok(scheduled
        .iter()
        .map(|p| Allocation {
            device: p.index,
            bandwidth_hz: total_hz * (1.0 / p.eta) / inv_sum,
            upload_s: common,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundDelay {
    pub total: Micros,
    pub compute: Vec<Micros>,
    pub upload: Micros,
    pub allocation: Vec<Allocation>,
}

enum Phase {
    ComputeDone,
    UploadDone,
}

/// Simulate one synchronous round. `rngs[i]` drives `scheduled[i]`'s
/// compute draw. Uploads begin together once the slowest device finishes.
pub fn round_delay(
    scheduled: &[&DeviceProfile],
    total_hz: f64,
    model_bits: f64,
    rngs: &mut [RngStream],
) -> Result<RoundDelay> {
    assert_eq!(scheduled.len(), rngs.len());
    let allocation = allocate_bandwidth(scheduled, total_hz, model_bits)?;
    let mut queue = EventQueue::new();
    let mut compute = Vec::with_capacity(scheduled.len());
    for (p, rng) in scheduled.iter().zip(rngs.iter_mut()) {
        let t = Micros::from_secs_f64(compute_delay(p, rng)?);
        compute.push(t);
        queue.push(t, Phase::ComputeDone);
    }
    let upload = Micros::from_secs_f64(allocation[0].upload_s);
    let mut pending = scheduled.len();
    let mut total = Micros::ZERO;
    while let Some((t, ev)) = queue.pop() {
        match ev {
            Phase::ComputeDone => {
                pending -= 1;
                if pending == 0 {
                    queue.push(t + upload, Phase::UploadDone);
                }
            }
            Phase::UploadDone => total = t,
        }
    }
    Ok(RoundDelay {
        total,
        compute,
        upload,
        allocation,
    })
}

/// `E[max_i (mu_i + Exp(theta_i))]` by quadrature of `1 − Π F_i(t)`.
pub fn expected_max_compute(profiles: &[&DeviceProfile]) -> f64 {
    let start = profiles.iter().map(|p| p.mu).fold(0.0, f64::max);
    let slowest = profiles.iter().map(|p| p.theta).fold(f64::INFINITY, f64::min);
    let span = 50.0 / slowest;
    let steps = 20_000usize;
    let h = span / steps as f64;
    let survival = |t: f64| {
        1.0 - profiles
            .iter()
            .map(|p| 1.0 - (-p.theta * (t - p.mu).max(0.0)).exp())
            .product::<f64>()
    };
    // Composite Simpson on [start, start + span].
    let mut acc = survival(start) + survival(start + span);
    for k in 1..steps {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * survival(start + k as f64 * h);
    }
    start + acc * h / 3.0
}

/// Expected round delay for a fixed scheduled set.
pub fn expected_round_delay(scheduled: &[&DeviceProfile], total_hz: f64, model_bits: f64) -> f64 {
    let inv_sum: f64 = scheduled.iter().map(|p| 1.0 / p.eta).sum();
    expected_max_compute(scheduled) + model_bits * inv_sum / total_hz
}

/// Monte-Carlo mean round delay (seconds) with `k` devices drawn uniformly
/// per round, plus the standard error of that mean.
pub fn mc_round_delay(
    profiles: &[DeviceProfile],
    k: usize,
    total_hz: f64,
    model_bits: f64,
    rounds: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut pick = derive_stream(seed, StreamId::new("mc-delay", k as u64, "pick"));
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    for r in 0..rounds {
        let chosen: Vec<&DeviceProfile> = pick
            .choose(profiles.len(), k)
            .into_iter()
            .map(|i| &profiles[i])
            .collect();
        let mut rngs: Vec<RngStream> = chosen
            .iter()
            .map(|p| derive_stream(seed, StreamId::new("mc-delay", (r as u64) << 16 | p.index as u64, "compute")))
            .collect();
        let d = round_delay(&chosen, total_hz, model_bits, &mut rngs)?.total.as_secs_f64();
        sum += d;
        sum2 += d * d;
    }
    let n = rounds as f64;
    let mean = sum / n;
    let var = (sum2 / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    Ok((mean, (var / n).sqrt()))
}

/// Result of fitting the total bandwidth to a target mean round delay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub total_bandwidth_hz: f64,
    pub target_delay_s: f64,
    pub target_k: usize,
    /// Monte-Carlo `E[D | K = target_k]` at the fitted bandwidth.
    pub mean_delay_target_k_s: f64,
    /// Monte-Carlo `E[D | K = 1]` at the fitted bandwidth.
    pub mean_delay_k1_s: f64,
    pub mc_rounds: usize,
}

impl Calibration {
    /// Rounds affordable at K=1 within `budget_s`.
    pub fn rounds_k1(&self, budget_s: f64) -> u64 {
        (budget_s / self.mean_delay_k1_s).floor() as u64
    }
}

/// Bisect the total bandwidth so the Monte-Carlo mean delay at `target_k`
/// matches `target_delay_s`. Draws are common across bisection steps, so
/// the estimate is monotone in the bandwidth.
pub fn calibrate_bandwidth(
    profiles: &[DeviceProfile],
    model_bits: f64,
    target_k: usize,
    target_delay_s: f64,
    mc_rounds: usize,
    seed: u64,
) -> Result<Calibration> {
    if target_k == 0 || target_k > profiles.len() {
        return Err(Error::param(format!("target K={target_k} out of range")));
    }
    // Compute-only floor: the delay with unlimited bandwidth.
    let (floor, _) = mc_round_delay(profiles, target_k, f64::INFINITY, model_bits, mc_rounds, seed)?;
    if target_delay_s <= floor * 1.0001 {
        return Err(Error::Calibration(format!(
            "target E[D|K={target_k}] = {target_delay_s}s unattainable: compute alone takes {floor:.4}s; attainable range ({floor:.4}s, inf)"
        )));
    }
    let eval = |hz: f64| mc_round_delay(profiles, target_k, hz, model_bits, mc_rounds, seed).map(|r| r.0);
    let (mut lo, mut hi) = (1.0f64, 1.0f64);
    while eval(hi)? > target_delay_s {
        hi *= 2.0;
    }
    while eval(lo)? < target_delay_s {
        lo /= 2.0;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if eval(mid)? > target_delay_s {
            lo = mid;
        } else {
            hi = mid;
        }
        if (hi - lo) / hi < 1e-9 {
            break;
        }
    }
    let hz = 0.5 * (lo + hi);
    let mean_target = eval(hz)?;
    let (mean_k1, _) = mc_round_delay(profiles, 1, hz, model_bits, mc_rounds, seed)?;
    Ok(Calibration {
        total_bandwidth_hz: hz,
        target_delay_s,
        target_k,
        mean_delay_target_k_s: mean_target,
        mean_delay_k1_s: mean_k1,
        mc_rounds,
    })
}
