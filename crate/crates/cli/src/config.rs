//! Layered run configuration: defaults, then a strict JSON config file,
//! then command-line flags, highest wins.
//!
//! The file mirrors the flag names: every leaf key is settable as a dotted
//! flag (`--mfcc.window_ms 32`), and a handful of common knobs also have
//! top-level aliases (`epochs`, `batch_size`, `learning_rate`, `seed`).

use crate::CliError;
use asr_core::features::MfccConfig;
use asr_core::model::ModelConfig;
use asr_core::train::{OptimizerKind, TrainConfig};
use clap::Args;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::PathBuf;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n_hidden: usize,
    pub relu_clip: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::new(1, 1);
        ModelSection {
            n_hidden: d.n_hidden,
            relu_clip: d.relu_clip,
            dropout: d.dropout,
            seed: d.seed,
        }
    }
}

impl ModelSection {
    /// Widths come from the feature settings and the alphabet, never from
    /// configuration.
    pub fn to_model_config(&self, n_input: usize, n_output: usize) -> ModelConfig {
        let mut cfg = ModelConfig::new(n_input, n_output);
        cfg.n_hidden = self.n_hidden;
        cfg.relu_clip = self.relu_clip;
        cfg.dropout = self.dropout;
        cfg.seed = self.seed;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            train: 0.8,
            dev: 0.1,
            test: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Greedy,
    Beam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderSection {
    pub kind: DecoderKind,
    pub beam_width: usize,
    pub lm_weight: f64,
    pub insertion_bonus: f64,
    pub lm_path: Option<PathBuf>,
}

impl Default for DecoderSection {
    fn default() -> Self {
        DecoderSection {
            kind: DecoderKind::Greedy,
            beam_width: 32,
            lm_weight: 0.75,
            insertion_bonus: 1.0,
            lm_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmSection {
    pub order: usize,
    pub k: f64,
}

impl Default for LmSection {
    fn default() -> Self {
        LmSection { order: 3, k: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub mfcc: MfccConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub split: SplitSection,
    pub decoder: DecoderSection,
    pub lm: LmSection,
    pub augments: Vec<String>,
    // top-level aliases, folded into their sections after loading
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub seed: Option<u64>,
}

impl PipelineConfig {
    fn fold_aliases(&mut self) {
        if let Some(e) = self.epochs.take() {
            self.train.epochs = e;
        }
        if let Some(b) = self.batch_size.take() {
            self.train.batch_size = b;
        }
        if let Some(lr) = self.learning_rate.take() {
            self.train.learning_rate = lr;
        }
        if let Some(s) = self.seed.take() {
            self.apply_global_seed(s);
        }
    }

    fn apply_global_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.split.seed = seed;
        self.model.seed = seed;
    }
}

/// Every value-level flag shared by the subcommands. Dotted names mirror
/// the config file keys exactly.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigOverrides {
    /// JSON config file; flags override its values
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Seed applied to train.seed, split.seed, and model.seed at once
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,

    #[arg(long = "mfcc.window_ms", value_name = "MS", help_heading = "Features")]
    pub mfcc_window_ms: Option<f64>,
    #[arg(long = "mfcc.step_ms", value_name = "MS", help_heading = "Features")]
    pub mfcc_step_ms: Option<f64>,
    #[arg(long = "mfcc.n_fft", value_name = "N", help_heading = "Features")]
    pub mfcc_n_fft: Option<usize>,
    #[arg(long = "mfcc.n_mels", value_name = "N", help_heading = "Features")]
    pub mfcc_n_mels: Option<usize>,
    #[arg(long = "mfcc.n_coeffs", value_name = "N", help_heading = "Features")]
    pub mfcc_n_coeffs: Option<usize>,
    #[arg(long = "mfcc.preemphasis", value_name = "A", help_heading = "Features")]
    pub mfcc_preemphasis: Option<f64>,
    #[arg(long = "mfcc.log_floor", value_name = "E", help_heading = "Features")]
    pub mfcc_log_floor: Option<f64>,
    #[arg(long = "mfcc.context", value_name = "N", help_heading = "Features")]
    pub mfcc_context: Option<usize>,

    #[arg(long = "model.n_hidden", value_name = "N", help_heading = "Model")]
    pub model_n_hidden: Option<usize>,
    #[arg(long = "model.relu_clip", value_name = "X", help_heading = "Model")]
    pub model_relu_clip: Option<f64>,
    #[arg(long = "model.dropout", value_name = "RATE", help_heading = "Model")]
    pub model_dropout: Option<f64>,
    #[arg(long = "model.seed", value_name = "N", help_heading = "Model")]
    pub model_seed: Option<u64>,

    #[arg(
        long = "train.epochs",
        visible_alias = "epochs",
        value_name = "N",
        help_heading = "Training"
    )]
    pub train_epochs: Option<usize>,
    #[arg(
        long = "train.batch_size",
        visible_alias = "batch-size",
        value_name = "N",
        help_heading = "Training"
    )]
    pub train_batch_size: Option<usize>,
    #[arg(
        long = "train.learning_rate",
        visible_alias = "learning-rate",
        value_name = "LR",
        help_heading = "Training"
    )]
    pub train_learning_rate: Option<f64>,
    #[arg(long = "train.beta1", value_name = "B", help_heading = "Training")]
    pub train_beta1: Option<f64>,
    #[arg(long = "train.beta2", value_name = "B", help_heading = "Training")]
    pub train_beta2: Option<f64>,
    #[arg(long = "train.epsilon", value_name = "E", help_heading = "Training")]
    pub train_epsilon: Option<f64>,
    /// Optimizer: adam or sgd
    #[arg(long = "train.optimizer", value_name = "NAME", help_heading = "Training")]
    pub train_optimizer: Option<String>,
    #[arg(long = "train.seed", value_name = "N", help_heading = "Training")]
    pub train_seed: Option<u64>,
    /// Checkpoint directory; relative paths resolve under --work
    #[arg(long = "train.checkpoint_dir", value_name = "DIR", help_heading = "Training")]
    pub train_checkpoint_dir: Option<PathBuf>,
    /// Checkpoint to resume from
    #[arg(
        long = "train.load_checkpoint",
        visible_alias = "resume",
        value_name = "FILE",
        help_heading = "Training"
    )]
    pub train_load_checkpoint: Option<PathBuf>,
    #[arg(
        long = "train.early_stop_patience",
        value_name = "N",
        help_heading = "Training"
    )]
    pub train_early_stop_patience: Option<usize>,

    #[arg(long = "split.train", value_name = "F", help_heading = "Split")]
    pub split_train: Option<f64>,
    #[arg(long = "split.dev", value_name = "F", help_heading = "Split")]
    pub split_dev: Option<f64>,
    #[arg(long = "split.test", value_name = "F", help_heading = "Split")]
    pub split_test: Option<f64>,
    #[arg(long = "split.seed", value_name = "N", help_heading = "Split")]
    pub split_seed: Option<u64>,

    /// Decoder: greedy or beam
    #[arg(long = "decoder.kind", value_name = "NAME", help_heading = "Decoder")]
    pub decoder_kind: Option<String>,
    #[arg(
        long = "decoder.beam_width",
        visible_alias = "beam-width",
        value_name = "N",
        help_heading = "Decoder"
    )]
    pub decoder_beam_width: Option<usize>,
    #[arg(long = "decoder.lm_weight", value_name = "A", help_heading = "Decoder")]
    pub decoder_lm_weight: Option<f64>,
    #[arg(long = "decoder.insertion_bonus", value_name = "B", help_heading = "Decoder")]
    pub decoder_insertion_bonus: Option<f64>,
    /// Character language model file for beam decoding
    #[arg(
        long = "decoder.lm_path",
        visible_alias = "lm",
        value_name = "FILE",
        help_heading = "Decoder"
    )]
    pub decoder_lm_path: Option<PathBuf>,

    #[arg(long = "lm.order", visible_alias = "order", value_name = "N", help_heading = "Language model")]
    pub lm_order: Option<usize>,
    #[arg(long = "lm.k", value_name = "K", help_heading = "Language model")]
    pub lm_k: Option<f64>,

    /// Augmentation spec such as gain[p=0.5,db=-6:0]; repeatable,
    /// replaces any list from the config file
    #[arg(long = "augment", value_name = "SPEC", help_heading = "Training")]
    pub augment: Vec<String>,
}

fn parse_optimizer(name: &str) -> Result<OptimizerKind, CliError> {
    match name {
        "adam" => Ok(OptimizerKind::Adam),
        "sgd" => Ok(OptimizerKind::Sgd),
        other => Err(CliError::user(format!(
            "unknown optimizer `{other}` (expected adam or sgd)"
        ))),
    }
}

fn parse_decoder_kind(name: &str) -> Result<DecoderKind, CliError> {
    match name {
        "greedy" => Ok(DecoderKind::Greedy),
        "beam" => Ok(DecoderKind::Beam),
        other => Err(CliError::user(format!(
            "unknown decoder `{other}` (expected greedy or beam)"
        ))),
    }
}

impl ConfigOverrides {
    /// Loads the config file (if any) and layers these flags on top.
    pub fn resolve(&self) -> Result<PipelineConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| {
                    CliError::user(format!("cannot read config {}: {e}", path.display()))
                })?;
                let cfg: PipelineConfig = serde_json::from_str(&text).map_err(|e| {
                    CliError::user(format!("config {}: {e}", path.display()))
                })?;
                cfg
            }
            None => PipelineConfig::default(),
        };
        cfg.fold_aliases();
        if let Some(s) = self.seed {
            cfg.apply_global_seed(s);
        }
        self.apply_mfcc(&mut cfg.mfcc);

        let m = &mut cfg.model;
        set(&mut m.n_hidden, self.model_n_hidden);
        set(&mut m.relu_clip, self.model_relu_clip);
        set(&mut m.dropout, self.model_dropout);
        set(&mut m.seed, self.model_seed);

        let t = &mut cfg.train;
        set(&mut t.epochs, self.train_epochs);
        set(&mut t.batch_size, self.train_batch_size);
        set(&mut t.learning_rate, self.train_learning_rate);
        set(&mut t.beta1, self.train_beta1);
        set(&mut t.beta2, self.train_beta2);
        set(&mut t.epsilon, self.train_epsilon);
        if let Some(name) = &self.train_optimizer {
            t.optimizer = parse_optimizer(name)?;
        }
        set(&mut t.seed, self.train_seed);
        set(&mut t.checkpoint_dir, self.train_checkpoint_dir.clone());
        if let Some(p) = &self.train_load_checkpoint {
            t.load_checkpoint = Some(p.clone());
        }
        if let Some(n) = self.train_early_stop_patience {
            t.early_stop_patience = Some(n);
        }

        let s = &mut cfg.split;
        set(&mut s.train, self.split_train);
        set(&mut s.dev, self.split_dev);
        set(&mut s.test, self.split_test);
        set(&mut s.seed, self.split_seed);

        let d = &mut cfg.decoder;
        if let Some(name) = &self.decoder_kind {
            d.kind = parse_decoder_kind(name)?;
        }
        set(&mut d.beam_width, self.decoder_beam_width);
        set(&mut d.lm_weight, self.decoder_lm_weight);
        set(&mut d.insertion_bonus, self.decoder_insertion_bonus);
        if let Some(p) = &self.decoder_lm_path {
            d.lm_path = Some(p.clone());
        }

        set(&mut cfg.lm.order, self.lm_order);
        set(&mut cfg.lm.k, self.lm_k);

        if !self.augment.is_empty() {
            cfg.augments = self.augment.clone();
        }
        Ok(cfg)
    }

    /// Applies only the explicit feature flags; used both on fresh configs
    /// and on feature settings recovered from a checkpoint.
    pub fn apply_mfcc(&self, mfcc: &mut MfccConfig) {
        set(&mut mfcc.window_ms, self.mfcc_window_ms);
        set(&mut mfcc.step_ms, self.mfcc_step_ms);
        set(&mut mfcc.n_fft, self.mfcc_n_fft);
        set(&mut mfcc.n_mels, self.mfcc_n_mels);
        set(&mut mfcc.n_coeffs, self.mfcc_n_coeffs);
        set(&mut mfcc.preemphasis, self.mfcc_preemphasis);
        set(&mut mfcc.log_floor, self.mfcc_log_floor);
        set(&mut mfcc.context, self.mfcc_context);
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
