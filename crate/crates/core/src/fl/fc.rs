//! Joint device scheduling and bandwidth allocation with fast convergence
//! (FC): pick the per-round device count that minimizes the predicted loss
//! gap reachable within the remaining delay budget.

use super::delay::{expected_round_delay, DeviceProfile};
use super::proxy::ConvergenceProxy;
use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq)]
pub struct FcDecision {
    pub k: usize,
    pub devices: Vec<usize>,
    /// No device count fits one more expected round in the budget.
    pub budget_exhausted: bool,
    /// `G(K*) = A(1 + B_div/K*)/R(K*)`; infinite when exhausted.
    pub predicted_gap: f64,
}

/// Precomputed expected round delays for the predicted-fastest `K` devices.
#[derive(Debug, Clone)]
pub struct FcPlanner {
    predicted: Vec<(usize, f64)>,
    expected_delay: Vec<f64>,
}

impl FcPlanner {
    pub fn new(profiles: &[DeviceProfile], total_hz: f64, model_bits: f64) -> Self {
        let mut predicted: Vec<(usize, f64)> = profiles
            .iter()
            .map(|p| (p.index, p.mean_compute() + model_bits / (total_hz * p.eta)))
            .collect();
        predicted.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let by_index = |i: usize| profiles.iter().find(|p| p.index == i).expect("profile");
        let expected_delay = (1..=profiles.len())
            .map(|k| {
                let set: Vec<&DeviceProfile> = predicted[..k].iter().map(|&(i, _)| by_index(i)).collect();
                expected_round_delay(&set, total_hz, model_bits)
            })
            .collect();
        Self {
            predicted,
            expected_delay,
        }
    }

    pub fn n_devices(&self) -> usize {
        self.predicted.len()
    }

    /// `E[D(K)]` for the `K` predicted-fastest devices.
    pub fn expected_delay(&self, k: usize) -> f64 {
        self.expected_delay[k - 1]
    }

    /// Rounds affordable `R(K) = floor(budget / E[D(K)])`.
    pub fn rounds_affordable(&self, k: usize, budget_s: f64) -> u64 {
        (budget_s / self.expected_delay(k)).floor() as u64
    }

    /// `K*` and whether the budget is exhausted.
    pub fn choose_k(&self, budget_s: f64, proxy: &ConvergenceProxy) -> (usize, bool, f64) {
        let mut best: Option<(usize, f64)> = None;
        for k in 1..=self.n_devices() {
            let r = self.rounds_affordable(k, budget_s);
            if r == 0 {
                continue;
            }
            // A scales every candidate equally, so it is applied afterwards.
            let g = (1.0 + proxy.b_div / k as f64) / r as f64;
            if best.is_none_or(|(_, bg)| g < bg) {
                best = Some((k, g));
            }
        }
        match best {
            Some((k, g)) => (k, false, proxy.a * g),
            None => (1, true, f64::INFINITY),
        }
    }

    /// The `k` devices with the smallest predicted completion; equal
    /// predictions are ordered by a fresh random permutation each call.
    pub fn fastest(&self, k: usize, rng: &mut RngStream) -> Vec<usize> {
        let mut order = self.predicted.clone();
        rng.shuffle(&mut order);
        order.sort_by(|a, b| a.1.total_cmp(&b.1));
        order[..k].iter().map(|&(i, _)| i).collect()
    }
}

pub fn fc_schedule(
    planner: &FcPlanner,
    budget_remaining_s: f64,
    proxy: &ConvergenceProxy,
    rng: &mut RngStream,
) -> Result<FcDecision> {
    if !(budget_remaining_s > 0.0) {
        return Err(Error::param("fc_schedule needs a positive remaining budget"));
    }
    let (k, budget_exhausted, predicted_gap) = planner.choose_k(budget_remaining_s, proxy);
    Ok(FcDecision {
        k,
        devices: planner.fastest(k, rng),
        budget_exhausted,
        predicted_gap,
    })
}
