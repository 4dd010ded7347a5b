//! Experiment documents: one TOML file per experiment, an optional
//! calibration sidecar next to it, and command-line overrides on top.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tes_core::fl::{CentralConfig, FlConfig};
use tes_core::infer::{Augment, ChannelModel};
use tes_core::nn::SgdConfig;

use crate::error::{BenchError, Result};

/// Environment variable naming the directory relative dataset paths resolve
/// against.
pub const DATA_DIR_ENV: &str = "TES_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    #[default]
    Fl,
    Centralized,
    Infer,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Fl => "fl",
            Scenario::Centralized => "centralized",
            Scenario::Infer => "infer",
        })
    }
}

fn default_n_train() -> usize {
    10_000
}

fn default_n_validation() -> usize {
    1_000
}

fn default_n_test() -> usize {
    2_000
}

/// Where samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Procedural digits, regenerated per seed.
    Synth {
        #[serde(default = "default_n_train")]
        n_train: usize,
        #[serde(default = "default_n_validation")]
        n_validation: usize,
        #[serde(default = "default_n_test")]
        n_test: usize,
    },
    /// IDX files. Validation is carved from the end of the training file; a
    /// missing test pair holds out the last sixth of the training file.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
        #[serde(default = "default_n_validation")]
        n_validation: usize,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synth {
            n_train: default_n_train(),
            n_validation: default_n_validation(),
            n_test: default_n_test(),
        }
    }
}

impl FromStr for DatasetSpec {
    type Err = BenchError;

    /// `synth:N` or `idx:IMAGES,LABELS`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || BenchError::Config(format!("dataset `{s}`: expected synth:N or idx:IMAGES,LABELS"));
        match s.split_once(':') {
            Some(("synth", n)) => Ok(DatasetSpec::Synth {
                n_train: n.trim().parse().map_err(|_| bad())?,
                n_validation: default_n_validation(),
                n_test: default_n_test(),
            }),
            Some(("idx", paths)) => {
                let (images, labels) = paths.split_once(',').ok_or_else(bad)?;
                Ok(DatasetSpec::Idx {
                    train_images: images.trim().into(),
                    train_labels: labels.trim().into(),
                    test_images: None,
                    test_labels: None,
                    n_validation: default_n_validation(),
                })
            }
            _ => Err(bad()),
        }
    }
}

/// Compression-level selection policy for the inference scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(try_from = "String", into = "String")]
pub enum SchedulerSpec {
    NoCompression,
    Fixed(usize),
    OfflineDp,
    #[default]
    Mdp,
}

impl FromStr for SchedulerSpec {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "no-compression" => Ok(Self::NoCompression),
            "offline-dp" => Ok(Self::OfflineDp),
            "mdp" => Ok(Self::Mdp),
            other => other
                .strip_prefix("fixed:")
                .and_then(|l| l.parse().ok())
                .map(Self::Fixed)
                .ok_or_else(|| {
                    BenchError::Config(format!(
                        "scheduler `{other}`: expected no-compression, fixed:L, offline-dp or mdp"
                    ))
                }),
        }
    }
}

impl fmt::Display for SchedulerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NoCompression => f.write_str("no-compression"),
            Self::Fixed(l) => write!(f, "fixed:{l}"),
            Self::OfflineDp => f.write_str("offline-dp"),
            Self::Mdp => f.write_str("mdp"),
        }
    }
}

impl TryFrom<String> for SchedulerSpec {
    type Error = BenchError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SchedulerSpec> for String {
    fn from(s: SchedulerSpec) -> String {
        s.to_string()
    }
}

/// How the inference classifier is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSpec {
    /// Load this checkpoint instead of training.
    pub checkpoint: Option<PathBuf>,
    pub epochs: usize,
    pub sgd: SgdConfig,
    /// Seed for the classifier and the dataset it is trained and tested on.
    pub seed: u64,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        Self {
            checkpoint: None,
            epochs: 5,
            sgd: SgdConfig::default(),
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub lambda: f64,
    pub horizon_slots: u64,
    pub deadline: u32,
    pub channel: ChannelModel,
    pub retransmit: bool,
    pub augment: Augment,
    pub scheduler: SchedulerSpec,
    /// States kept per slot by the offline planner.
    pub beam: usize,
    pub q_max: usize,
    pub gamma: f64,
    pub tolerance: f64,
    pub max_states: usize,
    pub classifier: ClassifierSpec,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            horizon_slots: 2_000,
            deadline: 12,
            channel: ChannelModel::default(),
            retransmit: true,
            augment: Augment::Off,
            scheduler: SchedulerSpec::Mdp,
            beam: 10_000,
            q_max: 4,
            gamma: 0.99,
            tolerance: 1e-6,
            max_states: 200_000,
            classifier: ClassifierSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub seeds: Vec<u64>,
    /// Output directory; `--out` overrides it.
    pub out: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub fl: FlConfig,
    pub centralized: CentralConfig,
    pub infer: InferConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Fl,
            seeds: vec![1],
            out: None,
            dataset: DatasetSpec::default(),
            fl: FlConfig::default(),
            centralized: CentralConfig::default(),
            infer: InferConfig::default(),
        }
    }
}

/// Path of the calibration sidecar that belongs to `config_path`.
pub fn sidecar_path(config_path: &Path) -> PathBuf {
    let mut name = config_path.file_stem().unwrap_or_default().to_os_string();
    name.push(".calibration.toml");
    config_path.with_file_name(name)
}

/// Values written by `calibrate` and applied on load.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub total_bandwidth_hz: f64,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Read `path`, then apply its calibration sidecar if one exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        let sidecar = sidecar_path(path);
        if sidecar.exists() {
            let s: Sidecar = toml::from_str(&fs::read_to_string(&sidecar)?)?;
            config.fl.total_bandwidth_hz = s.total_bandwidth_hz;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(BenchError::Config("seed list is empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(BenchError::Config("seed list has duplicates".into()));
        }
        match &self.dataset {
            DatasetSpec::Synth { n_train, n_test, .. } if *n_train == 0 || *n_test == 0 => {
                return Err(BenchError::Config("synthetic dataset needs n_train and n_test > 0".into()));
            }
            _ => {}
        }
        match self.scenario {
            Scenario::Fl => self.fl.validate()?,
            Scenario::Centralized => self.centralized.validate()?,
            Scenario::Infer => {
                let i = &self.infer;
                i.channel.validate()?;
                if !(0.0..=1.0).contains(&i.lambda) || i.deadline == 0 || i.horizon_slots == 0 {
                    return Err(BenchError::Config(
                        "infer needs lambda in [0, 1], deadline >= 1 and horizon_slots >= 1".into(),
                    ));
                }
                if i.classifier.checkpoint.is_none() && i.classifier.epochs == 0 {
                    return Err(BenchError::Config("classifier needs a checkpoint or epochs >= 1".into()));
                }
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, output directory excluded.
    pub fn hash(&self) -> String {
        let canonical = Self {
            out: None,
            ..self.clone()
        };
        let json = serde_json::to_string(&canonical).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Resolve a dataset path against `TES_DATA_DIR` when it is relative.
pub fn resolve_data_path(path: &Path) -> PathBuf {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(dir) if path.is_relative() => Path::new(&dir).join(path),
        _ => path.to_path_buf(),
    }
}
