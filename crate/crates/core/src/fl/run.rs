//! The federated training loop under a total delay budget.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::delay::{round_delay, DeviceProfile};
use super::fc::{fc_schedule, FcPlanner};
use super::proxy::{fit_proxy, update_divergence, ConvergenceProxy, PilotRound};
use super::train::{fedavg, local_update};
use crate::data::{partition, Dataset, PartitionMode};
use crate::error::{Error, Result};
use crate::event::Micros;
use crate::nn::{init_model, Model, SgdConfig, PARAM_COUNT};
use crate::rng::{derive_stream, RngStream, StreamId};

/// Total bandwidth that puts `E[D | K=20]` at 1.71 s for the default fleet.
pub const DEFAULT_BANDWIDTH_HZ: f64 = 28.56e6;
/// Checkpoint transported as 32-bit parameters.
pub const DEFAULT_MODEL_BITS: f64 = (PARAM_COUNT * 32) as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Scheduler {
    /// `K` devices drawn uniformly at random each round.
    Fixed(usize),
    Fc,
}

impl fmt::Display for Scheduler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheduler::Fixed(k) => write!(f, "fixed:{k}"),
            Scheduler::Fc => write!(f, "fc"),
        }
    }
}

impl FromStr for Scheduler {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "fc" {
            return Ok(Scheduler::Fc);
        }
        s.strip_prefix("fixed:")
            .or_else(|| s.strip_prefix("fixed"))
            .and_then(|k| k.trim_matches(|c| c == '(' || c == ')').parse().ok())
            .map(Scheduler::Fixed)
            .ok_or_else(|| Error::param(format!("unknown scheduler {s:?} (expected fc or fixed:K)")))
    }
}

impl From<Scheduler> for String {
    fn from(s: Scheduler) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for Scheduler {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Where the convergence proxy parameters come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProxySetting {
    /// Pilot rounds with every device scheduled, fitting `(A, B_div)` from
    /// the spread of the local updates and the validation loss decay.
    FitOnline { pilot_rounds: usize },
    Fixed { a: f64, b_div: f64 },
}

impl Default for ProxySetting {
    fn default() -> Self {
        ProxySetting::FitOnline { pilot_rounds: 10 }
    }
}

/// Compute and channel parameters shared by every device.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceDefaults {
    pub mu: f64,
    pub theta: f64,
    pub eta: f64,
}

impl Default for DeviceDefaults {
    fn default() -> Self {
        Self {
            mu: 0.27,
            theta: 12.0,
            eta: 1.0,
        }
    }
}

impl DeviceDefaults {
    /// Identical profiles over an empty data assignment.
    pub fn fleet(&self, n: usize) -> Vec<DeviceProfile> {
        (0..n)
            .map(|index| DeviceProfile {
                index,
                mu: self.mu,
                theta: self.theta,
                eta: self.eta,
                data: Vec::new(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlConfig {
    pub n_devices: usize,
    pub total_bandwidth_hz: f64,
    pub model_size_bits: f64,
    pub delay_budget_s: f64,
    pub local_epochs: usize,
    pub sgd: SgdConfig,
    pub scheduler: Scheduler,
    pub proxy: ProxySetting,
    pub device: DeviceDefaults,
    pub partition: PartitionMode,
    /// Evaluate test accuracy every this many rounds; 0 evaluates only the
    /// final model.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for FlConfig {
    fn default() -> Self {
        Self {
            n_devices: 20,
            total_bandwidth_hz: DEFAULT_BANDWIDTH_HZ,
            model_size_bits: DEFAULT_MODEL_BITS,
            delay_budget_s: 50.0,
            local_epochs: 1,
            sgd: SgdConfig::default(),
            scheduler: Scheduler::Fc,
            proxy: ProxySetting::default(),
            device: DeviceDefaults::default(),
            partition: PartitionMode::Iid,
            eval_every: 1,
            seed: 1,
        }
    }
}

impl FlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_devices == 0 {
            return Err(Error::param("n_devices must be >= 1"));
        }
        if !(self.delay_budget_s > 0.0) {
            return Err(Error::param("delay budget T must be > 0"));
        }
        if !(self.total_bandwidth_hz > 0.0) || !(self.model_size_bits > 0.0) {
            return Err(Error::param("bandwidth and model size must be > 0"));
        }
        if self.local_epochs == 0 {
            return Err(Error::param("local_epochs must be >= 1"));
        }
        if let Scheduler::Fixed(k) = self.scheduler {
            if k == 0 || k > self.n_devices {
                return Err(Error::param(format!("fixed K={k} outside 1..={}", self.n_devices)));
            }
        }
        if let ProxySetting::Fixed { a, b_div } = self.proxy {
            ConvergenceProxy::new(a, b_div)?;
        }
        let d = self.device;
        if !(d.mu >= 0.0) || !(d.theta > 0.0) || !(d.eta > 0.0) {
            return Err(Error::param("device defaults need mu >= 0, theta > 0, eta > 0"));
        }
        Ok(())
    }
}

/// Training, server-side validation (used only by the pilot fit) and test
/// splits.
#[derive(Debug, Clone)]
pub struct FlData {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub t_start_s: f64,
    pub scheduled: Vec<usize>,
    pub compute_s: Vec<f64>,
    pub upload_s: f64,
    pub delay_s: f64,
    pub cum_delay_s: f64,
    pub test_accuracy: Option<f64>,
}

impl RoundRecord {
    pub fn k(&self) -> usize {
        self.scheduled.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub records: Vec<RoundRecord>,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    /// Proxy used by FC, if any.
    pub proxy: Option<ConvergenceProxy>,
    /// Measurements from FC's pilot rounds.
    pub pilot: Vec<PilotRound>,
    pub budget_exhausted: bool,
    /// Delay of the first round that did not fit, if the run hit the budget.
    pub excluded_delay_s: Option<f64>,
}

impl TrainRun {
    pub fn rounds(&self) -> usize {
        self.records.len()
    }

    pub fn cum_delay_s(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.cum_delay_s)
    }

    pub fn mean_k(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.k() as f64).sum::<f64>() / self.records.len() as f64
    }
}

/// Run federated training until the next round would overrun the budget.
pub fn run_fl(config: &FlConfig, data: &FlData) -> Result<TrainRun> {
    config.validate()?;
    let seed = config.seed;
    let n = config.n_devices;
    let budget = Micros::from_secs_f64(config.delay_budget_s);
    let hz = config.total_bandwidth_hz;
    let bits = config.model_size_bits;

    let part = partition(&data.train, n, config.partition, seed)?;
    let mut profiles = config.device.fleet(n);
    for (p, idx) in profiles.iter_mut().zip(&part.assignment) {
        p.data = idx.clone();
        p.validate()?;
    }
    let planner = matches!(config.scheduler, Scheduler::Fc).then(|| FcPlanner::new(&profiles, hz, bits));
    let (mut proxy, pilot_rounds) = match config.proxy {
        ProxySetting::Fixed { a, b_div } => (Some(ConvergenceProxy::new(a, b_div)?), 0),
        ProxySetting::FitOnline { pilot_rounds } => (None, pilot_rounds),
    };
    if planner.is_none() {
        proxy = None;
    }
    let needs_pilot = planner.is_some() && proxy.is_none();

    let mut global = init_model(seed);
    let initial_accuracy = global.evaluate(&data.test);
    let mut select = derive_stream(seed, StreamId::new("fl-select", 0, "pick"));
    let mut pilot = Vec::new();
    let mut records = Vec::new();
    let mut cum = Micros::ZERO;
    let mut budget_exhausted = false;
    // FC plans K* once against the budget left after the pilot.
    let mut planned_k = None;
    let mut excluded_delay_s = None;

    for t in 0.. {
        let in_pilot = needs_pilot && t < pilot_rounds.max(1) && n > 1;
        if needs_pilot && !in_pilot && proxy.is_none() {
            proxy = Some(if pilot.is_empty() {
                ConvergenceProxy::new(1.0, 0.0)?
            } else {
                fit_proxy(&pilot)?
            });
        }
        let scheduled: Vec<usize> = match (&planner, config.scheduler) {
            (Some(_), _) if in_pilot => (0..n).collect(),
            (Some(planner), _) => {
                let mut tie = derive_stream(seed, StreamId::new("fl-fc", t as u64, "tie"));
                match planned_k {
                    Some(k) => planner.fastest(k, &mut tie),
                    None => {
                        let remaining = budget.0.saturating_sub(cum.0);
                        if remaining == 0 {
                            break;
                        }
                        let proxy = proxy.as_ref().expect("proxy fitted before FC rounds");
                        let d = fc_schedule(planner, Micros(remaining).as_secs_f64(), proxy, &mut tie)?;
                        budget_exhausted = d.budget_exhausted;
                        planned_k = Some(d.k);
                        d.devices
                    }
                }
            }
            (None, Scheduler::Fixed(k)) => select.choose(n, k),
            (None, Scheduler::Fc) => unreachable!(),
        };

        let refs: Vec<&DeviceProfile> = scheduled.iter().map(|&i| &profiles[i]).collect();
        let mut rngs: Vec<RngStream> = scheduled
            .iter()
            .map(|&i| derive_stream(seed, StreamId::new("fl", (t as u64) << 16 | i as u64, "compute")))
            .collect();
        let delay = round_delay(&refs, hz, bits, &mut rngs)?;
        let end = cum + delay.total;
        if end > budget {
            excluded_delay_s = Some(delay.total.as_secs_f64());
            break;
        }

        let mut locals = Vec::with_capacity(scheduled.len());
        let mut weights = Vec::with_capacity(scheduled.len());
        for &i in &scheduled {
            let mut rng = derive_stream(seed, StreamId::new("fl-local", (t as u64) << 16 | i as u64, "shuffle"));
            let p = &profiles[i];
            locals.push(local_update(&global, &data.train, &p.data, config.local_epochs, config.sgd, &mut rng)?);
            weights.push(p.data.len());
        }
        let refs: Vec<&Model> = locals.iter().collect();
        let aggregated = fedavg(&refs, &weights)?;
        if in_pilot {
            pilot.push(PilotRound {
                divergence: update_divergence(&global, &locals, &weights)?,
                loss_before: global.mean_loss(&data.validation),
                loss_after: aggregated.mean_loss(&data.validation),
            });
        }
        global = aggregated;

        let evaluate = config.eval_every > 0 && (t + 1) % config.eval_every == 0;
        records.push(RoundRecord {
            round: t,
            t_start_s: cum.as_secs_f64(),
            scheduled,
            compute_s: delay.compute.iter().map(|c| c.as_secs_f64()).collect(),
            upload_s: delay.upload.as_secs_f64(),
            delay_s: delay.total.as_secs_f64(),
            cum_delay_s: end.as_secs_f64(),
            test_accuracy: evaluate.then(|| global.evaluate(&data.test)),
        });
        cum = end;
    }

    let final_accuracy = match records.last() {
        Some(RoundRecord {
            test_accuracy: Some(a), ..
        }) => *a,
        Some(_) => global.evaluate(&data.test),
        None => initial_accuracy,
    };
    if needs_pilot && proxy.is_none() && !pilot.is_empty() {
        proxy = Some(fit_proxy(&pilot)?);
    }
    Ok(TrainRun {
        records,
        initial_accuracy,
        final_accuracy,
        proxy,
        pilot,
        budget_exhausted,
        excluded_delay_s,
    })
}

/// `round,t_start_s,K,D_t_s,cum_delay_s,test_accuracy`; accuracy is blank
/// for rounds that were not evaluated.
pub fn write_rounds_csv(mut w: impl Write, run: &TrainRun) -> Result<()> {
    writeln!(w, "round,t_start_s,K,D_t_s,cum_delay_s,test_accuracy")?;
    for r in &run.records {
        let acc = r.test_accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
        writeln!(
            w,
            "{},{:.6},{},{:.6},{:.6},{}",
            r.round,
            r.t_start_s,
            r.k(),
            r.delay_s,
            r.cum_delay_s,
            acc
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;

    fn small_data() -> FlData {
        FlData {
            train: synth_dataset(400, 11).unwrap(),
            validation: synth_dataset(100, 12).unwrap(),
            test: synth_dataset(100, 13).unwrap(),
        }
    }

    fn config(scheduler: Scheduler, budget: f64) -> FlConfig {
        FlConfig {
            scheduler,
            delay_budget_s: budget,
            eval_every: 1,
            ..FlConfig::default()
        }
    }

    #[test]
    fn scheduler_strings() {
        assert_eq!("fc".parse::<Scheduler>().unwrap(), Scheduler::Fc);
        assert_eq!("fixed:5".parse::<Scheduler>().unwrap(), Scheduler::Fixed(5));
        assert_eq!("fixed(5)".parse::<Scheduler>().unwrap(), Scheduler::Fixed(5));
        assert!("greedy".parse::<Scheduler>().is_err());
        assert_eq!(Scheduler::Fixed(3).to_string(), "fixed:3");
    }

    #[test]
    fn tiny_budget_reports_initial_accuracy() {
        let data = small_data();
        let run = run_fl(&config(Scheduler::Fixed(1), 0.05), &data).unwrap();
        assert_eq!(run.rounds(), 0);
        assert_eq!(run.final_accuracy, run.initial_accuracy);
        assert!(run.excluded_delay_s.unwrap() > 0.05);
    }

    #[test]
    fn budget_respected_and_tight() {
        let data = small_data();
        for s in [Scheduler::Fixed(1), Scheduler::Fixed(20), Scheduler::Fc] {
            let run = run_fl(&config(s, 6.0), &data).unwrap();
            assert!(run.cum_delay_s() <= 6.0 + 1e-9);
            assert!(run.cum_delay_s() + run.excluded_delay_s.unwrap() > 6.0);
            assert!(run.records.windows(2).all(|w| w[0].cum_delay_s <= w[1].cum_delay_s));
            for r in &run.records {
                let slowest = r.compute_s.iter().cloned().fold(0.0, f64::max);
                assert!((r.delay_s - (slowest + r.upload_s)).abs() < 2e-6);
            }
        }
    }

    #[test]
    fn fixed_k_schedules_k_devices() {
        let data = small_data();
        let run = run_fl(&config(Scheduler::Fixed(5), 5.0), &data).unwrap();
        assert!(run.records.iter().all(|r| r.k() == 5));
        assert!(run.proxy.is_none());
    }

    #[test]
    fn fc_pilots_then_fits() {
        let data = small_data();
        let run = run_fl(&config(Scheduler::Fc, 8.0), &data).unwrap();
        assert_eq!(run.records[0].k(), 20);
        assert_eq!(run.records[1].k(), 20);
        assert!(run.proxy.is_some());
    }

    #[test]
    fn deterministic_csv() {
        let data = small_data();
        let cfg = config(Scheduler::Fc, 5.0);
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_rounds_csv(&mut a, &run_fl(&cfg, &data).unwrap()).unwrap();
        write_rounds_csv(&mut b, &run_fl(&cfg, &data).unwrap()).unwrap();
        assert_eq!(a, b);
        assert!(String::from_utf8(a).unwrap().starts_with("round,t_start_s,K,"));
    }

    #[test]
    fn rejects_bad_config() {
        let data = small_data();
        assert!(run_fl(&config(Scheduler::Fixed(0), 5.0), &data).is_err());
        assert!(run_fl(&config(Scheduler::Fixed(21), 5.0), &data).is_err());
        assert!(run_fl(&config(Scheduler::Fc, 0.0), &data).is_err());
    }
}
