//! Flat `key = value` configuration files.
//!
//! Lines are `key = value`; `#` starts a comment. Unknown and repeated keys are
//! errors. Any key left out keeps its default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bootstrap::{AdamWConfig, LrSchedule, TauSchedule};
use crate::encoder::EncoderConfig;
use crate::error::{EatError, Result};
use crate::frontend::{FrontendConfig, NormStats};
use crate::masking::{parse_block_list, BlockShape};
use crate::model::{ModelConfig, PredictionMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Bce,
    Ce,
}

/// Every tunable of a pre-training or fine-tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    // optimizer and schedule
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub steps: u64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub grad_clip: f64,
    // pre-training
    pub clone_batch: usize,
    pub mask_ratio: f64,
    pub mask_blocks: Vec<BlockShape>,
    pub utterance_weight: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    // fine-tuning
    pub weighted_sampling: bool,
    pub weighted_sampling_size: usize,
    pub roll_augmentation: bool,
    pub noise_augmentation: bool,
    pub noise_snr_min: f64,
    pub noise_snr_max: f64,
    pub specaug: f64,
    pub mixup: f64,
    /// `None` infers the task from the manifest.
    pub multilabel: Option<bool>,
    /// `None` picks BCE for multilabel and CE otherwise.
    pub loss_function: Option<LossKind>,
    pub prediction_mode: PredictionMode,
    /// Train only the classifier head on a frozen encoder.
    pub head_only: bool,
    // data
    pub norm_mean: Option<f64>,
    pub norm_std: Option<f64>,
    pub target_frames: usize,
    pub frontend: FrontendConfig,
    // model
    pub model: ModelConfig,
    // run
    pub seed: u64,
    pub checkpoint_every: u64,
    pub gpus: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.05,
            peak_lr: 5e-4,
            min_lr: 1e-6,
            steps: 400_000,
            warmup_steps: 53_000,
            batch_size: 12,
            grad_clip: 0.0,
            clone_batch: 16,
            mask_ratio: 0.8,
            mask_blocks: vec![BlockShape::new(5, 5)],
            utterance_weight: 1.0,
            tau_start: 0.999,
            tau_end: 0.99999,
            weighted_sampling: false,
            weighted_sampling_size: 0,
            roll_augmentation: false,
            noise_augmentation: false,
            noise_snr_min: 10.0,
            noise_snr_max: 40.0,
            specaug: 0.0,
            mixup: 0.0,
            multilabel: None,
            loss_function: None,
            prediction_mode: PredictionMode::Cls,
            head_only: false,
            norm_mean: Some(NormStats::AUDIOSET.mean),
            norm_std: Some(NormStats::AUDIOSET.std),
            target_frames: 1024,
            frontend: FrontendConfig::default(),
            model: ModelConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            gpus: 1,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| EatError::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(EatError::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

fn parse_opt_f64(key: &str, value: &str) -> Result<Option<f64>> {
    match value {
        "auto" | "compute" | "none" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| EatError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            EatError::Config(msg) => EatError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Applies the settings in `text` over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Applies the settings in `text` over `self`.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| EatError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(EatError::Config(format!("line {}: `{key}` set twice", n + 1)));
            }
            self.set(key, value)
                .map_err(|e| EatError::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("configuration error: "))))?;
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let enc = &mut self.model.encoder;
        match key {
            "optimizer" => {
                if !value.eq_ignore_ascii_case("adamw") {
                    return Err(EatError::Config(format!("only AdamW is supported, got `{value}`")));
                }
            }
            "lr_schedule" => {
                if !value.eq_ignore_ascii_case("cosine") {
                    return Err(EatError::Config(format!("only the cosine schedule is supported, got `{value}`")));
                }
            }
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "peak_lr" => self.peak_lr = parse(key, value)?,
            "min_lr" => self.min_lr = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "clone_batch" => self.clone_batch = parse(key, value)?,
            "gpus" => self.gpus = parse(key, value)?,
            "dropout" => enc.dropout = parse(key, value)?,
            "drop_path" => enc.droppath_rate = parse(key, value)?,
            "weighted_sampling" => self.weighted_sampling = parse_bool(key, value)?,
            "weighted_sampling_size" => self.weighted_sampling_size = parse(key, value)?,
            "roll_augmentation" => self.roll_augmentation = parse_bool(key, value)?,
            "noise_augmentation" => self.noise_augmentation = parse_bool(key, value)?,
            "noise_snr_min" => self.noise_snr_min = parse(key, value)?,
            "noise_snr_max" => self.noise_snr_max = parse(key, value)?,
            "specaug" => self.specaug = parse(key, value)?,
            "mixup" => self.mixup = parse(key, value)?,
            "multilabel" => {
                self.multilabel = match value {
                    "auto" => None,
                    v => Some(parse_bool(key, v)?),
                }
            }
            "loss_function" => {
                self.loss_function = match value.to_ascii_lowercase().as_str() {
                    "auto" => None,
                    "mse" => Some(LossKind::Mse),
                    "bce" => Some(LossKind::Bce),
                    "ce" => Some(LossKind::Ce),
                    other => return Err(EatError::Config(format!("unknown loss `{other}`"))),
                }
            }
            "prediction_mode" => self.prediction_mode = value.parse()?,
            "head_only" => self.head_only = parse_bool(key, value)?,
            "norm_mean" => self.norm_mean = parse_opt_f64(key, value)?,
            "norm_std" => self.norm_std = parse_opt_f64(key, value)?,
            "mask_ratio" => self.mask_ratio = parse(key, value)?,
            "mask_blocks" => self.mask_blocks = parse_block_list(value)?,
            "utterance_weight" => self.utterance_weight = parse(key, value)?,
            "tau_start" => self.tau_start = parse(key, value)?,
            "tau_end" => self.tau_end = parse(key, value)?,
            "target_frames" => self.target_frames = parse(key, value)?,
            "sample_rate" => self.frontend.sample_rate = parse(key, value)?,
            "mel_bins" => self.frontend.mel_bins = parse(key, value)?,
            "patch_size" => self.model.patch_size = parse(key, value)?,
            "embed_dim" => enc.embed_dim = parse(key, value)?,
            "heads" => enc.heads = parse(key, value)?,
            "layers" => enc.layers = parse(key, value)?,
            "mlp_ratio" => enc.mlp_ratio = parse(key, value)?,
            "decoder_layers" => self.model.decoder_layers = parse(key, value)?,
            "decoder_kernel" => self.model.decoder_kernel = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            other => return Err(EatError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(EatError::Config(msg));
        self.model.validate()?;
        self.tau().validate()?;
        if self.batch_size == 0 || self.clone_batch == 0 {
            return bad("batch_size and clone_batch must be at least 1".into());
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask_ratio must lie in (0, 1), got {}", self.mask_ratio));
        }
        if !(0.0..1.0).contains(&self.specaug) {
            return bad(format!("specaug must lie in [0, 1), got {}", self.specaug));
        }
        if self.mixup < 0.0 || self.utterance_weight < 0.0 {
            return bad("mixup and utterance_weight must be non-negative".into());
        }
        if self.noise_snr_min > self.noise_snr_max {
            return bad("noise_snr_min exceeds noise_snr_max".into());
        }
        if let Some(std) = self.norm_std {
            if std <= 0.0 {
                return bad(format!("norm_std must be positive, got {std}"));
            }
        }
        if self.norm_mean.is_some() != self.norm_std.is_some() {
            return bad("norm_mean and norm_std must both be given or both computed".into());
        }
        if self.target_frames % self.model.patch_size != 0 || self.frontend.mel_bins % self.model.patch_size != 0 {
            return bad(format!(
                "target_frames {} and mel_bins {} must be multiples of patch_size {}",
                self.target_frames, self.frontend.mel_bins, self.model.patch_size
            ));
        }
        if self.min_lr > self.peak_lr {
            return bad("min_lr exceeds peak_lr".into());
        }
        Ok(())
    }

    pub fn norm(&self) -> Option<NormStats> {
        Some(NormStats {
            mean: self.norm_mean?,
            std: self.norm_std?,
        })
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            peak: self.peak_lr,
            min: self.min_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
        }
    }

    pub fn tau(&self) -> TauSchedule {
        TauSchedule {
            start: self.tau_start,
            end: self.tau_end,
            total_steps: self.steps,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }

    pub fn encoder(&self) -> &EncoderConfig {
        &self.model.encoder
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_pretraining_column() {
        let c = TrainConfig::default();
        assert_eq!((c.beta1, c.beta2, c.weight_decay), (0.9, 0.95, 0.05));
        assert_eq!((c.peak_lr, c.min_lr), (0.0005, 0.000001));
        assert_eq!((c.steps, c.warmup_steps, c.batch_size, c.clone_batch), (400_000, 53_000, 12, 16));
        assert_eq!(c.norm(), Some(NormStats::AUDIOSET));
        assert!(c.validate().is_ok());
    }

    #[test]
    fn parses_overrides_and_comments() {
        let c = TrainConfig::parse(
            "# smoke\nsteps = 300\nembed_dim=32 # narrow\nheads = 4\nmask_blocks = 5x5,6x4,8x3\nmultilabel = false\n\
             loss_function = ce\nnorm_mean = -6.627\nnorm_std = 5.359\nprediction_mode = mean\nspecaug = 0.2\n",
        )
        .unwrap();
        assert_eq!(c.steps, 300);
        assert_eq!(c.model.encoder.embed_dim, 32);
        assert_eq!(c.mask_blocks.len(), 3);
        assert_eq!(c.multilabel, Some(false));
        assert_eq!(c.loss_function, Some(LossKind::Ce));
        assert_eq!(c.norm(), Some(NormStats { mean: -6.627, std: 5.359 }));
        assert_eq!(c.prediction_mode, PredictionMode::Mean);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "nonsense = 1",
            "steps = 1\nsteps = 2",
            "steps",
            "steps = many",
            "embed_dim = 30\nheads = 4",
            "mask_ratio = 1.0",
            "norm_std = 0",
            "norm_mean = compute",
            "optimizer = sgd",
        ] {
            let err = TrainConfig::parse(text).unwrap_err();
            assert_eq!(err.exit_code(), 1, "{text}: {err}");
        }
    }

    #[test]
    fn computed_statistics() {
        let c = TrainConfig::parse("norm_mean = compute\nnorm_std = compute").unwrap();
        assert_eq!(c.norm(), None);
    }
}
