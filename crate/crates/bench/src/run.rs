//! Per-seed scenario execution, result bundles and parameter sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tes_core::data::{build_accuracy_table, default_ladder, CompressionLevel, PartitionMode};
use tes_core::fl::{calibrate_bandwidth, run_centralized, run_fl, write_rounds_csv, Calibration, Scheduler};
use tes_core::infer::{
    build_mdp, gen_trace, simulate, InferScheduler, LevelPredictions, LevelTable, MdpConfig, MdpPolicy, SimOptions,
};
use tes_core::nn::{train_classifier, Model};
use tes_core::rng::{derive_stream, StreamId};

use crate::config::{ExperimentConfig, Scenario, SchedulerSpec};
use crate::dataset::load_splits;
use crate::error::{BenchError, Result};

pub type Metrics = BTreeMap<String, f64>;

/// One seed's metrics and its CSV record.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub metrics: Metrics,
    pub csv: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub stddev: f64,
    pub n: usize,
}

/// Sample mean and standard deviation (`n − 1` denominator).
pub fn stat(values: &[f64]) -> Stat {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n.max(1) as f64;
    let stddev = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Stat { mean, stddev, n }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub scenario: String,
    pub config: ExperimentConfig,
    pub per_seed: Vec<SeedSummary>,
    pub summary: BTreeMap<String, Stat>,
}

impl Summary {
    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.summary.get(metric).map(|s| s.mean)
    }

    /// Per-seed values of `metric`, in seed order.
    pub fn values(&self, metric: &str) -> Vec<f64> {
        self.per_seed.iter().filter_map(|s| s.metrics.get(metric).copied()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub config_hash: String,
    pub seeds: Vec<SeedResult>,
    pub summary: Summary,
}

/// Everything the inference scenario shares across seeds.
pub struct InferAssets {
    pub ladder: Vec<CompressionLevel>,
    pub table: LevelTable,
    pub predictions: LevelPredictions,
    pub policy: Option<MdpPolicy>,
}

/// Classifier from the checkpoint, or trained on the classifier seed's
/// training split.
pub fn classifier(config: &ExperimentConfig) -> Result<Model> {
    let spec = &config.infer.classifier;
    match &spec.checkpoint {
        Some(path) => Ok(Model::load(path)?),
        None => {
            let data = load_splits(&config.dataset, spec.seed)?;
            Ok(train_classifier(&data.train, spec.epochs, spec.sgd, spec.seed)?)
        }
    }
}

/// Validation accuracy per level of the default ladder.
pub fn accuracy_table(config: &ExperimentConfig, model: &Model) -> Result<Vec<CompressionLevel>> {
    let data = load_splits(&config.dataset, config.infer.classifier.seed)?;
    Ok(build_accuracy_table(model, &data.validation, &default_ladder())?)
}

impl InferAssets {
    pub fn prepare(config: &ExperimentConfig) -> Result<Self> {
        let model = classifier(config)?;
        Self::with_model(config, &model)
    }

    pub fn with_model(config: &ExperimentConfig, model: &Model) -> Result<Self> {
        let i = &config.infer;
        let data = load_splits(&config.dataset, i.classifier.seed)?;
        let ladder = build_accuracy_table(model, &data.validation, &default_ladder())?;
        let table = LevelTable::new(&ladder, i.channel.capacity_bits)?;
        let predictions = LevelPredictions::build(model, &data.test, &ladder)?;
        let policy = match i.scheduler {
            SchedulerSpec::Mdp => Some(build_mdp(&mdp_config(config), &table)?),
            _ => None,
        };
        Ok(Self {
            ladder,
            table,
            predictions,
            policy,
        })
    }

    /// Rebuild the policy if the config's MDP inputs changed.
    fn policy_for(&self, config: &ExperimentConfig) -> Result<Option<MdpPolicy>> {
        if config.infer.scheduler != SchedulerSpec::Mdp {
            return Ok(None);
        }
        let wanted = mdp_config(config);
        match &self.policy {
            Some(p) if p.config == wanted => Ok(Some(p.clone())),
            _ => Ok(Some(build_mdp(&wanted, &self.table)?)),
        }
    }
}

pub fn mdp_config(config: &ExperimentConfig) -> MdpConfig {
    let i = &config.infer;
    MdpConfig {
        lambda: i.lambda,
        deadline: i.deadline,
        capacity_bits: i.channel.capacity_bits,
        q_max: i.q_max,
        gamma: i.gamma,
        tolerance: i.tolerance,
        max_states: i.max_states,
    }
}

fn header(hash: &str, seed: u64) -> String {
    format!("# config_hash={hash}\n# seed={seed}\n")
}

fn run_error(scenario: Scenario, seed: u64) -> impl Fn(tes_core::Error) -> BenchError {
    move |source| BenchError::Run {
        run: format!("{scenario} seed {seed}"),
        source,
    }
}

fn bool_metric(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Run one seed of the configured scenario.
pub fn run_seed(config: &ExperimentConfig, seed: u64, assets: Option<&InferAssets>) -> Result<SeedResult> {
    let hash = config.hash();
    let err = run_error(config.scenario, seed);
    let mut metrics = Metrics::new();
    let mut csv = header(&hash, seed);
    match config.scenario {
        Scenario::Fl => {
            let data = load_splits(&config.dataset, seed)?;
            let fl = tes_core::fl::FlConfig {
                seed,
                ..config.fl.clone()
            };
            let run = run_fl(&fl, &data).map_err(&err)?;
            let mut body = Vec::new();
            write_rounds_csv(&mut body, &run).map_err(&err)?;
            csv.push_str(&String::from_utf8(body).expect("csv is utf-8"));
            metrics.insert("final_accuracy".into(), run.final_accuracy);
            metrics.insert("initial_accuracy".into(), run.initial_accuracy);
            metrics.insert("rounds".into(), run.rounds() as f64);
            metrics.insert("mean_k".into(), run.mean_k());
            metrics.insert("cum_delay_s".into(), run.cum_delay_s());
            metrics.insert("budget_exhausted".into(), bool_metric(run.budget_exhausted));
            if let Some(p) = run.proxy {
                metrics.insert("proxy_a".into(), p.a);
                metrics.insert("proxy_b_div".into(), p.b_div);
            }
        }
        Scenario::Centralized => {
            let data = load_splits(&config.dataset, seed)?;
            let c = tes_core::fl::CentralConfig {
                seed,
                ..config.centralized.clone()
            };
            let run = run_centralized(&c, &data).map_err(&err)?;
            csv.push_str("cycle,uploaded,bits,cum_delay_s,received_total\n");
            for r in &run.cycles {
                let _ = writeln!(csv, "{},{},{},{:.6},{}", r.cycle, r.uploaded, r.bits, r.cum_delay_s, r.received_total);
            }
            metrics.insert("final_accuracy".into(), run.final_accuracy);
            metrics.insert("initial_accuracy".into(), run.initial_accuracy);
            metrics.insert("received".into(), run.received.len() as f64);
            metrics.insert("cycles".into(), run.cycles.len() as f64);
            metrics.insert("bits".into(), run.cycles.iter().map(|r| r.bits as f64).sum());
            for (l, &n) in run.level_usage.iter().enumerate() {
                metrics.insert(format!("uploads_level_{l}"), n as f64);
            }
        }
        Scenario::Infer => {
            let owned;
            let assets = match assets {
                Some(a) => a,
                None => {
                    owned = InferAssets::prepare(config)?;
                    &owned
                }
            };
            let i = &config.infer;
            let policy = assets.policy_for(config)?;
            let trace = gen_trace(
                i.lambda,
                i.horizon_slots,
                assets.predictions.n_samples(),
                &mut derive_stream(seed, StreamId::new("infer", 0, "trace")),
            )
            .map_err(&err)?;
            let scheduler = match i.scheduler {
                SchedulerSpec::NoCompression => InferScheduler::NoCompression,
                SchedulerSpec::Fixed(l) => InferScheduler::Fixed(l),
                SchedulerSpec::OfflineDp => InferScheduler::OfflineDp { beam: i.beam },
                SchedulerSpec::Mdp => InferScheduler::Mdp(policy.as_ref().expect("policy built for mdp")),
            };
            let options = SimOptions {
                deadline: i.deadline,
                loss_p: i.channel.packet_loss_p,
                retransmit: i.retransmit,
                augment: i.augment,
            };
            let mut channel = derive_stream(seed, StreamId::new("infer-channel", 0, "loss"));
            let s = simulate(scheduler, &options, &trace, &assets.predictions, &assets.table, &mut channel)
                .map_err(&err)?;
            csv.push_str(
                "scheduler,lambda,seed,tasks_total,completed_correct,wrong,expired,completion_ratio,retransmissions,augmentations,fallbacks,overflow,reward\n",
            );
            let _ = writeln!(
                csv,
                "{},{},{seed},{},{},{},{},{:.6},{},{},{},{},{:.6}",
                i.scheduler,
                i.lambda,
                s.tasks_total,
                s.completed_correct,
                s.wrong,
                s.expired,
                s.completion_ratio(),
                s.retransmissions,
                s.augmentations,
                s.fallbacks,
                s.overflow,
                s.reward
            );
            metrics.insert("completion_ratio".into(), s.completion_ratio());
            metrics.insert("tasks_total".into(), s.tasks_total as f64);
            metrics.insert("completed_correct".into(), s.completed_correct as f64);
            metrics.insert("wrong".into(), s.wrong as f64);
            metrics.insert("expired".into(), s.expired as f64);
            metrics.insert("retransmissions".into(), s.retransmissions as f64);
            metrics.insert("augmentations".into(), s.augmentations as f64);
            metrics.insert("fallbacks".into(), s.fallbacks as f64);
            metrics.insert("overflow".into(), s.overflow as f64);
            metrics.insert("reward".into(), s.reward);
            for (l, &n) in s.level_usage.iter().enumerate() {
                metrics.insert(format!("level_{l}_uses"), n as f64);
            }
        }
    }
    Ok(SeedResult { seed, metrics, csv })
}

/// Aggregate per-seed metrics; the summary depends only on seed order.
pub fn summarize(config: &ExperimentConfig, seeds: &[SeedResult]) -> Summary {
    let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in seeds {
        for (k, &v) in &s.metrics {
            columns.entry(k.clone()).or_default().push(v);
        }
    }
    Summary {
        config_hash: config.hash(),
        scenario: config.scenario.to_string(),
        config: ExperimentConfig {
            out: None,
            ..config.clone()
        },
        per_seed: seeds
            .iter()
            .map(|s| SeedSummary {
                seed: s.seed,
                metrics: s.metrics.clone(),
            })
            .collect(),
        summary: columns.iter().map(|(k, v)| (k.clone(), stat(v))).collect(),
    }
}

/// Run every seed, up to `jobs` at a time.
pub fn run_experiment(config: &ExperimentConfig, jobs: usize) -> Result<Bundle> {
    config.validate()?;
    let assets = match config.scenario {
        Scenario::Infer => Some(InferAssets::prepare(config)?),
        _ => None,
    };
    run_with_assets(config, jobs, assets.as_ref())
}

pub fn run_with_assets(config: &ExperimentConfig, jobs: usize, assets: Option<&InferAssets>) -> Result<Bundle> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
    let results: Vec<Result<SeedResult>> =
        pool.install(|| config.seeds.par_iter().map(|&seed| run_seed(config, seed, assets)).collect());
    let seeds = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Bundle {
        config_hash: config.hash(),
        summary: summarize(config, &seeds),
        seeds,
    })
}

/// `config.toml`, `seed_<n>.csv` per seed and `summary.json` under `dir`.
pub fn write_bundle(bundle: &Bundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let snapshot = format!("# config_hash={}\n{}", bundle.config_hash, bundle.summary.config.to_toml()?);
    fs::write(dir.join("config.toml"), snapshot)?;
    for s in &bundle.seeds {
        fs::write(dir.join(format!("seed_{}.csv", s.seed)), &s.csv)?;
    }
    let json = serde_json::to_string_pretty(&bundle.summary)?;
    fs::write(dir.join("summary.json"), json + "\n")?;
    Ok(())
}

/// Parameters a sweep can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Fixed scheduled-device count, or `fc`.
    K,
    Lambda,
    LossP,
    Distribution,
    Scheduler,
}

impl std::str::FromStr for Axis {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "K" | "k" => Ok(Axis::K),
            "lambda" => Ok(Axis::Lambda),
            "loss_p" => Ok(Axis::LossP),
            "distribution" => Ok(Axis::Distribution),
            "scheduler" => Ok(Axis::Scheduler),
            _ => Err(BenchError::Config(format!(
                "unknown sweep axis `{s}` (K, lambda, loss_p, distribution, scheduler)"
            ))),
        }
    }
}

/// `config` with the axis set to `value`.
pub fn apply_axis(config: &ExperimentConfig, axis: Axis, value: &str) -> Result<ExperimentConfig> {
    let mut c = config.clone();
    let number = |v: &str| -> Result<f64> {
        v.parse()
            .map_err(|_| BenchError::Config(format!("sweep value `{v}` is not a number")))
    };
    match axis {
        Axis::K => {
            c.fl.scheduler = if value == "fc" {
                Scheduler::Fc
            } else {
                Scheduler::Fixed(
                    value
                        .parse()
                        .map_err(|_| BenchError::Config(format!("K value `{value}` is not an integer")))?,
                )
            }
        }
        Axis::Lambda => c.infer.lambda = number(value)?,
        Axis::LossP => c.infer.channel.packet_loss_p = number(value)?,
        Axis::Distribution => {
            let mode: PartitionMode = value.parse()?;
            c.fl.partition = mode;
            c.centralized.partition = mode;
        }
        Axis::Scheduler => c.infer.scheduler = value.parse()?,
    }
    c.validate()?;
    Ok(c)
}

/// Long-format sweep table plus each point's bundle.
pub struct Sweep {
    pub points: Vec<(String, Bundle)>,
    pub csv: String,
}

pub fn run_sweep(config: &ExperimentConfig, axis: Axis, values: &[String], jobs: usize) -> Result<Sweep> {
    if values.is_empty() {
        return Err(BenchError::Config("sweep needs at least one value".into()));
    }
    let assets = match config.scenario {
        Scenario::Infer => {
            let mut c = config.clone();
            c.infer.scheduler = SchedulerSpec::NoCompression;
            Some(InferAssets::prepare(&c)?)
        }
        _ => None,
    };
    let mut points = Vec::with_capacity(values.len());
    for v in values {
        let point = apply_axis(config, axis, v)?;
        points.push((v.clone(), run_with_assets(&point, jobs, assets.as_ref())?));
    }
    let mut csv = format!("# config_hash={}\naxis_value,metric,mean,stddev,n_seeds\n", config.hash());
    for (v, b) in &points {
        for (metric, s) in &b.summary.summary {
            let _ = writeln!(csv, "{v},{metric},{},{},{}", s.mean, s.stddev, s.n);
        }
    }
    Ok(Sweep { points, csv })
}

/// Fit the total bandwidth so `E[D | K = n_devices]` hits `target_delay_s`.
pub fn calibrate(config: &ExperimentConfig, target_delay_s: f64, mc_rounds: usize, seed: u64) -> Result<Calibration> {
    let fl = &config.fl;
    let fleet = fl.device.fleet(fl.n_devices);
    Ok(calibrate_bandwidth(&fleet, fl.model_size_bits, fl.n_devices, target_delay_s, mc_rounds, seed)?)
}
