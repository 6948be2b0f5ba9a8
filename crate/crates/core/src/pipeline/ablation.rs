//! Sweeps over the block shape and the utterance weight.
//!
//! Each point pre-trains from the same seed and data, then scores the frozen
//! encoder with a nearest-centroid probe on a labelled set. Values are only
//! comparable within one sweep.

use serde::{Deserialize, Serialize};

use crate::encoder::Mode;
use crate::error::{EatError, Result};
use crate::frontend::NormStats;
use crate::masking::BlockShape;
use crate::model::{utterance_feature, ClipInput, ModelConfig, PredictionMode};
use crate::numerics::{ParamSet, Tape, Tensor};

use super::config::TrainConfig;
use super::finetune::LabeledSet;
use super::metrics::{accuracy, argmax};
use super::pretrain::Pretrainer;

pub const LAMBDA_SWEEP: [f64; 4] = [0.0, 0.01, 1.0, 10.0];

/// `1x1`, `2x2`, `5x5` and the mixed set `5x5,6x4,8x3`.
pub fn block_sweep_settings() -> Vec<(String, Vec<BlockShape>)> {
    let b = BlockShape::new;
    vec![
        ("1x1".into(), vec![b(1, 1)]),
        ("2x2".into(), vec![b(2, 2)]),
        ("5x5".into(), vec![b(5, 5)]),
        ("mixed".into(), vec![b(5, 5), b(6, 4), b(8, 3)]),
    ]
}

/// Every square block from `1x1` to `8x8`, then the mixed set.
pub fn block_sweep_settings_full() -> Vec<(String, Vec<BlockShape>)> {
    let mut all: Vec<_> = (1..=8).map(|k| (format!("{k}x{k}"), vec![BlockShape::new(k, k)])).collect();
    all.extend(block_sweep_settings().pop());
    all
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub label: String,
    pub mask_blocks: Vec<String>,
    pub lambda: f64,
    pub steps: u64,
    pub first_l_ufo: f64,
    pub final_l_ufo: f64,
    pub final_l_f: f64,
    pub final_l_u: f64,
    /// Held-out accuracy of a nearest-centroid probe on frozen mean-pooled features.
    pub probe_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub sweep: String,
    pub points: Vec<AblationPoint>,
}

/// Eval-mode utterance features, one row per input.
pub fn features(params: &ParamSet, cfg: &ModelConfig, inputs: &[Tensor], mode: PredictionMode) -> Result<Vec<Vec<f64>>> {
    inputs
        .iter()
        .map(|x| {
            let clip = ClipInput::new(x, cfg.patch_size)?;
            let mut tape = Tape::new();
            let b = params.bind_frozen(&mut tape);
            let f = utterance_feature(&mut tape, &b, cfg, &clip, mode, Mode::Eval)?;
            Ok(tape.value(f).data().to_vec())
        })
        .collect()
}

/// Accuracy of assigning each test feature to the nearest class centroid of
/// the training features. Features are standardized with training statistics.
pub fn centroid_probe(train: &[Vec<f64>], train_labels: &[usize], test: &[Vec<f64>], test_labels: &[usize]) -> Result<f64> {
    if train.is_empty() || train.len() != train_labels.len() {
        return Err(EatError::Invalid("probe needs labelled training features".into()));
    }
    let d = train[0].len();
    let n = train.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| train.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|j| (train.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-12))
        .collect();
    let z = |r: &Vec<f64>| -> Vec<f64> { (0..d).map(|j| (r[j] - mean[j]) / std[j]).collect() };
    let classes = train_labels.iter().max().map_or(0, |m| m + 1);
    let mut centroids = vec![vec![0.0; d]; classes];
    let mut counts = vec![0.0f64; classes];
    for (r, &c) in train.iter().zip(train_labels) {
        for (a, v) in centroids[c].iter_mut().zip(z(r)) {
            *a += v;
        }
        counts[c] += 1.0;
    }
    for (c, &k) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= k.max(1.0));
    }
    let pred: Vec<usize> = test
        .iter()
        .map(|r| {
            let zr = z(r);
            let neg: Vec<f64> = centroids
                .iter()
                .zip(&counts)
                .map(|(c, &k)| {
                    if k == 0.0 {
                        f64::NEG_INFINITY
                    } else {
                        -c.iter().zip(&zr).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                    }
                })
                .collect();
            argmax(&neg)
        })
        .collect();
    accuracy(&pred, test_labels)
}

/// Pre-trains one configuration and probes it.
pub fn run_point(
    cfg: TrainConfig,
    label: &str,
    norm: NormStats,
    corpus: &[Tensor],
    probe_train: &LabeledSet,
    probe_test: &LabeledSet,
) -> Result<AblationPoint> {
    let mut trainer = Pretrainer::new(cfg.clone(), norm, corpus)?;
    trainer.set_deterministic(true);
    let mut first = None;
    let mut last = None;
    while trainer.step_count() < cfg.steps {
        let rec = trainer.step()?;
        first.get_or_insert(rec.l_ufo);
        last = Some(rec);
    }
    let last = last.ok_or_else(|| EatError::Config("ablation needs at least one step".into()))?;
    let labels = |s: &LabeledSet| s.targets.iter().map(|t| argmax(t)).collect::<Vec<_>>();
    let ftr = features(trainer.student(), &cfg.model, &probe_train.inputs, PredictionMode::Mean)?;
    let fte = features(trainer.student(), &cfg.model, &probe_test.inputs, PredictionMode::Mean)?;
    Ok(AblationPoint {
        label: label.to_string(),
        mask_blocks: cfg.mask_blocks.iter().map(|b| b.to_string()).collect(),
        lambda: cfg.utterance_weight,
        steps: last.step,
        first_l_ufo: first.unwrap_or(last.l_ufo),
        final_l_ufo: last.l_ufo,
        final_l_f: last.l_f,
        final_l_u: last.l_u,
        probe_accuracy: centroid_probe(&ftr, &labels(probe_train), &fte, &labels(probe_test))?,
    })
}

/// One point per `(label, shapes)` setting, e.g. from [`block_sweep_settings`].
pub fn block_sweep(
    base: &TrainConfig,
    settings: &[(String, Vec<BlockShape>)],
    norm: NormStats,
    corpus: &[Tensor],
    probe_train: &LabeledSet,
    probe_test: &LabeledSet,
) -> Result<AblationReport> {
    let points = settings
        .iter()
        .map(|(label, blocks)| {
            let mut cfg = base.clone();
            cfg.mask_blocks = blocks.clone();
            run_point(cfg, label, norm, corpus, probe_train, probe_test)
        })
        .collect::<Result<_>>()?;
    Ok(AblationReport {
        sweep: "mask_blocks".into(),
        points,
    })
}

pub fn lambda_sweep(
    base: &TrainConfig,
    norm: NormStats,
    corpus: &[Tensor],
    probe_train: &LabeledSet,
    probe_test: &LabeledSet,
) -> Result<AblationReport> {
    let points = LAMBDA_SWEEP
        .iter()
        .map(|&lambda| {
            let mut cfg = base.clone();
            cfg.utterance_weight = lambda;
            run_point(cfg, &format!("lambda={lambda}"), norm, corpus, probe_train, probe_test)
        })
        .collect::<Result<_>>()?;
    Ok(AblationReport {
        sweep: "utterance_weight".into(),
        points,
    })
}
