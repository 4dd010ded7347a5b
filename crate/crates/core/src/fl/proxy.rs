//! Rounds-to-accuracy surrogate `N(K, eps) = ceil((A/eps)(1 + B_div/K))`.
//!
//! Averaging `K` local updates drawn from devices whose updates disagree
//! behaves like a stochastic step whose noise shrinks as `1/K`, so the rounds
//! needed inflate by `1 + B_div/K` with `B_div` the relative gradient
//! divergence `E‖Δ_i − Δ̄‖² / ‖Δ̄‖²`. The online fit measures it from pilot
//! rounds in which every device trains; `A` is the pilot's rounds per unit
//! loss reduction.
//!
//! The divergence ratio climbs as the mean update shrinks near convergence,
//! so the fit takes it from the latest pilot round, the state FC plans from.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Model;

/// Upper bound on a fitted `B_div`.
pub const B_DIV_MAX: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceProxy {
    pub a: f64,
    pub b_div: f64,
}

impl ConvergenceProxy {
    pub fn new(a: f64, b_div: f64) -> Result<Self> {
        if !(a > 0.0) || !(b_div >= 0.0) {
            return Err(Error::param(format!("proxy needs A > 0, B_div >= 0 (got {a}, {b_div})")));
        }
        Ok(Self { a, b_div })
    }

    /// Unrounded `(A/eps)(1 + B_div/K)`.
    pub fn rounds_real(&self, k: f64, eps: f64) -> f64 {
        self.a / eps * (1.0 + self.b_div / k)
    }

    pub fn rounds_needed(&self, k: f64, eps: f64) -> Result<u64> {
        if !(k >= 1.0) || !(eps > 0.0) {
            return Err(Error::param(format!("rounds_needed needs K >= 1, eps > 0 (got {k}, {eps})")));
        }
        Ok(self.rounds_real(k, eps).ceil() as u64)
    }
}

/// What one all-device pilot round reveals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PilotRound {
    /// `E‖Δ_i − Δ̄‖² / ‖Δ̄‖²` over the devices' model updates.
    pub divergence: f64,
    /// Validation loss before and after aggregation.
    pub loss_before: f64,
    pub loss_after: f64,
}

/// Relative divergence of local updates `Δ_i = local_i − global` around
/// their sample-weighted mean.
pub fn update_divergence(global: &Model, locals: &[Model], weights: &[usize]) -> Result<f64> {
    if locals.is_empty() || locals.len() != weights.len() {
        return Err(Error::Contract("divergence needs one weight per local model".into()));
    }
    let g = global.flat();
    let deltas: Vec<Vec<f64>> = locals
        .iter()
        .map(|m| m.flat().iter().zip(&g).map(|(a, b)| a - b).collect())
        .collect();
    let total: usize = weights.iter().sum();
    if total == 0 {
        return Err(Error::Contract("divergence weights sum to zero".into()));
    }
    let mut mean = vec![0.0; g.len()];
    for (d, &w) in deltas.iter().zip(weights) {
        let f = w as f64 / total as f64;
        for (m, v) in mean.iter_mut().zip(d) {
            *m += f * v;
        }
    }
    let mean_sq: f64 = mean.iter().map(|v| v * v).sum();
    let spread: f64 = deltas
        .iter()
        .zip(weights)
        .map(|(d, &w)| w as f64 / total as f64 * d.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum();
    if mean_sq == 0.0 {
        return Ok(if spread == 0.0 { 0.0 } else { B_DIV_MAX });
    }
    Ok((spread / mean_sq).min(B_DIV_MAX))
}

/// `B_div` from the latest pilot round, `A` from the mean loss reduction.
pub fn fit_proxy(pilot: &[PilotRound]) -> Result<ConvergenceProxy> {
    let Some(last) = pilot.last() else {
        return Err(Error::param("proxy fit needs at least one pilot round"));
    };
    let n = pilot.len() as f64;
    let b_div = last.divergence.clamp(0.0, B_DIV_MAX);
    let gain = pilot.iter().map(|p| p.loss_before - p.loss_after).sum::<f64>() / n;
    let a = if gain > 0.0 { 1.0 / gain } else { 1.0 };
    ConvergenceProxy::new(a, b_div)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_model;

    #[test]
    fn iid_limit_independent_of_k() {
        let p = ConvergenceProxy::new(10.0, 0.0).unwrap();
        let n1 = p.rounds_needed(1.0, 0.5).unwrap();
        assert!((1..=20).all(|k| p.rounds_needed(k as f64, 0.5).unwrap() == n1));
    }

    #[test]
    fn plug_in_values() {
        let p = ConvergenceProxy::new(10.0, 19.0).unwrap();
        assert_eq!(p.rounds_needed(1.0, 1.0).unwrap(), 200);
        assert_eq!(p.rounds_needed(20.0, 1.0).unwrap(), 20);
        let ns: Vec<u64> = (1..=20).map(|k| p.rounds_needed(k as f64, 1.0).unwrap()).collect();
        assert!(ns.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn bad_parameters() {
        assert!(ConvergenceProxy::new(0.0, 1.0).is_err());
        assert!(ConvergenceProxy::new(1.0, -1.0).is_err());
        let p = ConvergenceProxy::new(1.0, 1.0).unwrap();
        assert!(p.rounds_needed(0.5, 1.0).is_err());
        assert!(p.rounds_needed(1.0, 0.0).is_err());
    }

    fn shifted(base: &Model, offsets: &[f64]) -> Model {
        let v: Vec<f64> = base.flat().iter().zip(offsets.iter().cycle()).map(|(a, o)| a + o).collect();
        Model::from_flat(&v).unwrap()
    }

    #[test]
    fn identical_updates_have_no_divergence() {
        let g = init_model(1);
        let m = shifted(&g, &[0.01]);
        let d = update_divergence(&g, &[m.clone(), m.clone(), m], &[5, 5, 5]).unwrap();
        assert!(d < 1e-12, "{d}");
    }

    #[test]
    fn divergence_of_opposed_updates() {
        let g = init_model(1);
        // Updates +3c and −c: mean c, spread 4c², ratio 4.
        let a = shifted(&g, &[0.03]);
        let b = shifted(&g, &[-0.01]);
        let d = update_divergence(&g, &[a, b], &[1, 1]).unwrap();
        assert!((d - 4.0).abs() < 1e-6, "{d}");
    }

    #[test]
    fn fit_uses_latest_divergence_and_mean_gain() {
        let p = fit_proxy(&[
            PilotRound { divergence: 2.0, loss_before: 2.3, loss_after: 2.1 },
            PilotRound { divergence: 4.0, loss_before: 2.1, loss_after: 1.9 },
        ])
        .unwrap();
        assert!((p.b_div - 4.0).abs() < 1e-12);
        assert!((p.a - 5.0).abs() < 1e-9);
        let stalled = fit_proxy(&[PilotRound { divergence: 1.0, loss_before: 1.0, loss_after: 1.5 }]).unwrap();
        assert_eq!(stalled.a, 1.0);
        assert!(fit_proxy(&[]).is_err());
    }
}
