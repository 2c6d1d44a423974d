use std::path::{Path, PathBuf};

use meanflow::autodiff::Activation;
use meanflow::mixture::MixtureSpec;
use meanflow::objectives::TangentVariant;
use meanflow::sampler::Order;
use meanflow::schedule::{Noise, Schedule};
use meanflow::train::{Objective, TrainConfig};
use meanflow::validate::Fault;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Everything a command needs. Loaded from JSON, then patched by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    /// Mixture JSON written by `gen-data`. Defaults to `<output_dir>/mixture.json`.
    #[serde(default)]
    pub mixture: Option<PathBuf>,
    #[serde(default)]
    pub data: Option<DataSection>,
    #[serde(default)]
    pub train: Option<TrainSection>,
    #[serde(default)]
    pub sample: Option<SampleSection>,
    #[serde(default)]
    pub validate: Option<ValidateSection>,
    #[serde(default)]
    pub bench: Option<BenchSection>,
}

fn default_schedule() -> Schedule {
    Schedule::Linear
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Diagonal variances per component.
    pub covariances: Vec<Vec<f64>>,
    #[serde(default)]
    pub noise: Noise,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

fn default_samples() -> usize {
    2000
}

impl Default for DataSection {
    /// Two well-separated 2-D components.
    fn default() -> Self {
        Self {
            weights: vec![0.5, 0.5],
            means: vec![vec![2.0, 0.0], vec![-2.0, 0.0]],
            covariances: vec![vec![0.1, 0.1], vec![0.1, 0.1]],
            noise: Noise::default(),
            samples: default_samples(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_objective")]
    pub objective: Objective,
    /// Defaults to `[d+2, 64, 64, d]`.
    #[serde(default)]
    pub widths: Option<Vec<usize>>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub final_learning_rate: Option<f64>,
    #[serde(default = "default_train_batch")]
    pub batch_size: usize,
    #[serde(default = "default_train_steps")]
    pub steps: u64,
    #[serde(default = "default_equal_fraction")]
    pub r_equals_t_fraction: f64,
    #[serde(default)]
    pub tangent: TangentVariant,
    /// Write a checkpoint every this many steps; 0 writes only at the end.
    #[serde(default)]
    pub checkpoint_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            objective: default_objective(),
            widths: None,
            activation: default_activation(),
            learning_rate: default_lr(),
            final_learning_rate: None,
            batch_size: default_train_batch(),
            steps: default_train_steps(),
            r_equals_t_fraction: default_equal_fraction(),
            tangent: TangentVariant::default(),
            checkpoint_every: 0,
        }
    }
}

fn default_objective() -> Objective {
    Objective::MeanFlow
}

fn default_activation() -> Activation {
    Activation::Tanh
}

fn default_lr() -> f64 {
    1e-3
}

fn default_train_batch() -> usize {
    256
}

fn default_train_steps() -> u64 {
    2000
}

fn default_equal_fraction() -> f64 {
    0.25
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldChoice {
    Checkpoint,
    /// Oracle average fields of the mixture; no checkpoint needed.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    #[serde(default = "default_field")]
    pub source: FieldChoice,
    /// Defaults to `<output_dir>/checkpoint.json`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "one")]
    pub steps: usize,
    #[serde(default = "default_order")]
    pub order: Order,
    #[serde(default = "default_batch")]
    pub batch: usize,
    /// Fresh data draws for the energy distance.
    #[serde(default = "default_batch")]
    pub reference_samples: usize,
}

fn default_field() -> FieldChoice {
    FieldChoice::Checkpoint
}

fn one() -> usize {
    1
}

fn default_order() -> Order {
    Order::First
}

fn default_batch() -> usize {
    1000
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            source: default_field(),
            checkpoint: None,
            steps: 1,
            order: Order::First,
            batch: default_batch(),
            reference_samples: default_batch(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateSection {
    #[serde(default = "default_points")]
    pub points: usize,
    #[serde(default = "yes")]
    pub orders: bool,
    #[serde(default)]
    pub fault: Fault,
}

fn default_points() -> usize {
    100
}

fn yes() -> bool {
    true
}

impl Default for ValidateSection {
    fn default() -> Self {
        Self {
            points: default_points(),
            orders: true,
            fault: Fault::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    #[serde(default = "default_attention_sizes")]
    pub attention_sizes: Vec<usize>,
    #[serde(default = "default_pipeline_sizes")]
    pub pipeline_sizes: Vec<usize>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_degree")]
    pub degree: usize,
    #[serde(default = "default_pipeline_degree")]
    pub pipeline_degree: usize,
    #[serde(default = "one")]
    pub blocks: usize,
    #[serde(default = "default_pipeline_steps")]
    pub pipeline_steps: usize,
}

fn default_attention_sizes() -> Vec<usize> {
    vec![512, 1024, 2048, 4096]
}

fn default_pipeline_sizes() -> Vec<usize> {
    vec![8, 12, 16, 24]
}

fn default_repeats() -> usize {
    5
}

fn default_width() -> usize {
    4
}

fn default_degree() -> usize {
    4
}

fn default_pipeline_degree() -> usize {
    2
}

fn default_pipeline_steps() -> usize {
    2
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            attention_sizes: default_attention_sizes(),
            pipeline_sizes: default_pipeline_sizes(),
            repeats: default_repeats(),
            width: default_width(),
            degree: default_degree(),
            pipeline_degree: default_pipeline_degree(),
            blocks: 1,
            pipeline_steps: default_pipeline_steps(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn mixture_path(&self) -> PathBuf {
        self.mixture
            .clone()
            .unwrap_or_else(|| self.output_dir.join("mixture.json"))
    }

    pub fn data_section(&self) -> DataSection {
        self.data.clone().unwrap_or_default()
    }

    pub fn mixture_spec(&self) -> MixtureSpec {
        let spec = self.data_section();
        MixtureSpec {
            weights: spec.weights,
            means: spec.means,
            covariances: spec.covariances,
            seed: self.seed,
            noise: spec.noise,
        }
    }

    /// Training settings for data of dimension `d`.
    pub fn train_config(&self, d: usize) -> TrainConfig {
        let t = self.train.clone().unwrap_or_default();
        TrainConfig {
            objective: t.objective,
            schedule: self.schedule,
            widths: t.widths.unwrap_or_else(|| vec![d + 2, 64, 64, d]),
            activation: t.activation,
            learning_rate: t.learning_rate,
            final_learning_rate: t.final_learning_rate,
            batch_size: t.batch_size,
            steps: t.steps,
            r_equals_t_fraction: t.r_equals_t_fraction,
            tangent: t.tangent,
            seed: self.seed,
        }
    }
}

/// Hex SHA-256 of a value's JSON form.
pub fn hash_of<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config types serialize");
    hex::encode(Sha256::digest(&bytes))
}
