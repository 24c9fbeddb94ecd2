//! Run configuration: defaults, `key=value` config files, and conversion
//! into the model/training configs. Command-line flags override file
//! values; unknown keys fail with the list of valid keys.

use std::path::Path;

use crate::error::{Error, Result};
use crate::loss::ModePreset;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Every tunable knob shared by the CLI commands.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // model architecture
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    /// Deliberation length `m` (thinking depth).
    pub cod_length: usize,
    pub model_seed: u64,
    // vocabulary
    pub vocab_max_size: usize,
    // training
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub tau: f64,
    pub in_batch_negatives: usize,
    pub hard_negatives: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub mode: ModePreset,
    pub detach_teacher: bool,
    pub checkpoint_every: usize,
    // retrieval + evaluation
    pub ndcg_k: usize,
    pub depth: usize,
    pub exponential_gain: bool,
    pub instruction: Option<String>,
    // analysis
    pub sample_limit: usize,
    pub sample_seed: Option<u64>,
    pub adjacent_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            layers: 2,
            d_model: 64,
            heads: 4,
            ff_dim: 256,
            max_len: 128,
            cod_length: 8,
            model_seed: 0,
            vocab_max_size: 4096,
            steps: 500,
            batch_size: 8,
            peak_lr: 1e-3,
            warmup_fraction: 0.03,
            tau: 0.05,
            in_batch_negatives: 7,
            hard_negatives: 1,
            weight_decay: 0.01,
            seed: 0,
            mode: ModePreset::Debater,
            detach_teacher: true,
            checkpoint_every: 0,
            ndcg_k: 10,
            depth: 100,
            exponential_gain: false,
            instruction: None,
            sample_limit: 200,
            sample_seed: None,
            adjacent_steps: 5,
        }
    }
}

pub const VALID_KEYS: &[&str] = &[
    "layers",
    "d_model",
    "heads",
    "ff_dim",
    "max_len",
    "cod_length",
    "model_seed",
    "vocab_max_size",
    "steps",
    "batch_size",
    "peak_lr",
    "warmup_fraction",
    "tau",
    "in_batch_negatives",
    "hard_negatives",
    "weight_decay",
    "seed",
    "mode",
    "detach_teacher",
    "checkpoint_every",
    "ndcg_k",
    "depth",
    "exponential_gain",
    "instruction",
    "sample_limit",
    "sample_seed",
    "adjacent_steps",
];

impl RunConfig {
    /// Apply one `key=value` assignment.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.trim().parse().map_err(|_| {
                Error::Input(format!("config key {key}: cannot parse value {value:?}"))
            })
        }
        match key {
            "layers" => self.layers = parse(key, value)?,
            "d_model" => self.d_model = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "ff_dim" => self.ff_dim = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "cod_length" => self.cod_length = parse(key, value)?,
            "model_seed" => self.model_seed = parse(key, value)?,
            "vocab_max_size" => self.vocab_max_size = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "peak_lr" => self.peak_lr = parse(key, value)?,
            "warmup_fraction" => self.warmup_fraction = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "in_batch_negatives" => self.in_batch_negatives = parse(key, value)?,
            "hard_negatives" => self.hard_negatives = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "mode" => self.mode = value.trim().parse()?,
            "detach_teacher" => self.detach_teacher = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "ndcg_k" => self.ndcg_k = parse(key, value)?,
            "depth" => self.depth = parse(key, value)?,
            "exponential_gain" => self.exponential_gain = parse(key, value)?,
            "instruction" => {
                let v = value.trim();
                self.instruction = if v.is_empty() {
                    None
                } else {
                    Some(v.to_string())
                };
            }
            "sample_limit" => self.sample_limit = parse(key, value)?,
            "sample_seed" => {
                let v = value.trim();
                self.sample_seed = if v.is_empty() {
                    None
                } else {
                    Some(parse(key, value)?)
                };
            }
            "adjacent_steps" => self.adjacent_steps = parse(key, value)?,
            other => {
                return Err(Error::Input(format!(
                    "unknown config key {other:?}; valid keys: {}",
                    VALID_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Read a `key=value` file (blank lines and `#` comments allowed).
    pub fn load(path: &Path) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let text = std::fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::format(
                    path,
                    lineno + 1,
                    format!("expected key=value, got {line:?}"),
                ));
            };
            cfg.apply(key.trim(), value)
                .map_err(|e| Error::format(path, lineno + 1, e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            d_model: self.d_model,
            heads: self.heads,
            ff_dim: self.ff_dim,
            max_len: self.max_len,
            vocab_size,
            cod_length: self.cod_length,
            seed: self.model_seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            peak_lr: self.peak_lr,
            warmup_fraction: self.warmup_fraction,
            tau: self.tau,
            in_batch_negatives: self.in_batch_negatives,
            hard_negatives_per_example: self.hard_negatives,
            mode: self.mode.flags(),
            seed: self.seed,
            weight_decay: self.weight_decay,
            detach_teacher: self.detach_teacher,
            ..TrainConfig::default()
        }
    }
}
