use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tes_bench::config::{sidecar_path, Sidecar};
use tes_bench::run::{accuracy_table, classifier};
use tes_bench::{calibrate, run_experiment, run_sweep, write_bundle, Axis, BenchError, DatasetSpec, ExperimentConfig, Result};
use tes_core::data::write_accuracy_csv;

#[derive(Parser)]
#[command(name = "tes-bench", version, about = "Timely edge learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment document (TOML). Without it every setting takes its default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds, comma separated; replaces the config's list.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Seeds run concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory; replaces the config's `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `synth:N` or `idx:IMAGES,LABELS`; replaces the config's dataset.
    #[arg(long)]
    dataset: Option<DatasetSpec>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the total bandwidth to the all-device mean round delay and write
    /// it to the config's sidecar.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Target E[D | K = n_devices] in seconds.
        #[arg(long, default_value_t = 1.71)]
        target: f64,
        #[arg(long, default_value_t = 10_000)]
        mc_rounds: usize,
    },
    /// Run every seed of the experiment and write its result bundle.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Run the experiment once per axis value and write a long-format table.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// K, lambda, loss_p, distribution or scheduler.
        #[arg(long)]
        axis: Axis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Validation accuracy per compression level for the inference classifier.
    AccuracyTable {
        #[command(flatten)]
        common: Common,
        /// Classifier checkpoint; trained from the config when absent.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Train the inference classifier and save its checkpoint.
    TrainModel {
        #[command(flatten)]
        common: Common,
    },
}

/// File settings, then the sidecar, then flags.
fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if !common.seed.is_empty() {
        config.seeds = common.seed.clone();
    }
    if let Some(out) = &common.out {
        config.out = Some(out.clone());
    }
    if let Some(d) = &common.dataset {
        config.dataset = d.clone();
    }
    config.validate()?;
    Ok(config)
}

fn out_dir(config: &ExperimentConfig) -> PathBuf {
    config.out.clone().unwrap_or_else(|| PathBuf::from("results"))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Calibrate {
            common,
            target,
            mc_rounds,
        } => {
            let config = load(&common)?;
            let seed = config.seeds[0];
            let cal = calibrate(&config, target, mc_rounds, seed)?;
            let budget = config.fl.delay_budget_s;
            println!("total_bandwidth_hz = {}", cal.total_bandwidth_hz);
            println!("E[D | K={}] = {:.4} s", cal.target_k, cal.mean_delay_target_k_s);
            println!("E[D | K=1] = {:.4} s, {} rounds in {budget} s", cal.mean_delay_k1_s, cal.rounds_k1(budget));
            let sidecar = toml::to_string(&Sidecar {
                total_bandwidth_hz: cal.total_bandwidth_hz,
            })?;
            if let Some(path) = &common.config {
                write(&sidecar_path(path), &sidecar)?;
            }
            let dir = out_dir(&config);
            write(&dir.join("calibration.toml"), &sidecar)?;
            write(&dir.join("calibration.json"), &(serde_json::to_string_pretty(&cal)? + "\n"))?;
        }
        Command::Run { common } => {
            let config = load(&common)?;
            let bundle = run_experiment(&config, common.jobs)?;
            let dir = out_dir(&config);
            write_bundle(&bundle, &dir)?;
            for (metric, s) in &bundle.summary.summary {
                println!("{metric}: mean {:.6} sd {:.6} (n={})", s.mean, s.stddev, s.n);
            }
            println!("wrote {}", dir.display());
        }
        Command::Sweep { common, axis, values } => {
            let config = load(&common)?;
            let sweep = run_sweep(&config, axis, &values, common.jobs)?;
            let dir = out_dir(&config);
            for (v, bundle) in &sweep.points {
                write_bundle(bundle, &dir.join(format!("point_{v}").replace([':', '/'], "_")))?;
            }
            write(&dir.join("sweep.csv"), &sweep.csv)?;
            print!("{}", sweep.csv);
        }
        Command::AccuracyTable { common, model } => {
            let mut config = load(&common)?;
            if model.is_some() {
                config.infer.classifier.checkpoint = model;
            }
            let table = accuracy_table(&config, &classifier(&config)?)?;
            let path = out_dir(&config).join("accuracy_table.csv");
            fs::create_dir_all(path.parent().expect("file in a directory"))?;
            write_accuracy_csv(&path, &table)?;
            for l in &table {
                println!("L{} {} bits: {:.4}", l.level_id, l.payload_bits(), l.accuracy.unwrap_or(f64::NAN));
            }
        }
        Command::TrainModel { common } => {
            let config = load(&common)?;
            let model = classifier(&config)?;
            let path = out_dir(&config).join("classifier.bin");
            fs::create_dir_all(path.parent().expect("file in a directory"))?;
            model.save(&path)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let BenchError::Run { source, .. } = &e {
                eprintln!("  caused by: {source:?}");
            }
            ExitCode::FAILURE
        }
    }
}
