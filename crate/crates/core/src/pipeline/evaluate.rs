//! Eval-mode scoring of a fine-tuned checkpoint.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EatError, Result};
use crate::model::{predict, ClipInput, ModelConfig, PredictionMode};
use crate::numerics::{ParamSet, Tensor};

use super::checkpoint::{Checkpoint, Stage};
use super::data::load_inputs;
use super::manifest::{Manifest, TaskKind};
use super::metrics::{accuracy, argmax, map_multilabel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskKind,
    pub clips: usize,
    pub classes: Vec<String>,
    pub prediction_mode: PredictionMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
    /// Per-class AP in vocabulary order; `null` for classes without positives.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap: Option<Vec<Option<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    /// Per-class recall in vocabulary order; `null` for classes without examples.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_accuracy: Option<Vec<Option<f64>>>,
}

/// Eval-mode logits of every input, in order.
pub fn predict_all(params: &ParamSet, cfg: &ModelConfig, inputs: &[Tensor], mode: PredictionMode) -> Result<Vec<Vec<f64>>> {
    inputs
        .par_iter()
        .map(|x| predict(params, cfg, &ClipInput::new(x, cfg.patch_size)?, mode))
        .collect()
}

/// Scores `logits` against multi-hot `targets`.
pub fn score(
    task: TaskKind,
    classes: &[String],
    mode: PredictionMode,
    logits: &[Vec<f64>],
    targets: &[Vec<f64>],
) -> Result<EvalReport> {
    let mut report = EvalReport {
        task,
        clips: logits.len(),
        classes: classes.to_vec(),
        prediction_mode: mode,
        map: None,
        ap: None,
        accuracy: None,
        class_accuracy: None,
    };
    match task {
        TaskKind::Multilabel => {
            let t: Vec<Vec<bool>> = targets.iter().map(|r| r.iter().map(|&v| v > 0.5).collect()).collect();
            let m = map_multilabel(logits, &t)?;
            report.map = Some(m.map);
            report.ap = Some(m.ap);
        }
        TaskKind::SingleLabel => {
            let pred: Vec<usize> = logits.iter().map(|l| argmax(l)).collect();
            let truth: Vec<usize> = targets.iter().map(|t| argmax(t)).collect();
            report.accuracy = Some(accuracy(&pred, &truth)?);
            report.class_accuracy = Some(
                (0..classes.len())
                    .map(|k| {
                        let idx: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] == k).collect();
                        (!idx.is_empty()).then(|| idx.iter().filter(|&&i| pred[i] == k).count() as f64 / idx.len() as f64)
                    })
                    .collect(),
            );
        }
        TaskKind::Unlabeled => return Err(EatError::Data("cannot score unlabeled data".into())),
    }
    Ok(report)
}

/// Runs a fine-tuned checkpoint over `manifest` without augmentation or droppath.
/// A multilabel manifest against a single-label checkpoint is a task mismatch.
pub fn evaluate(ckpt: &Checkpoint, manifest: &Manifest, workers: usize) -> Result<EvalReport> {
    if ckpt.meta.stage != Stage::Finetune {
        return Err(EatError::Data("evaluation needs a fine-tuned checkpoint".into()));
    }
    let task = ckpt
        .meta
        .task
        .ok_or_else(|| EatError::Data("checkpoint records no task".into()))?;
    match (task, manifest.kind()) {
        (_, TaskKind::Unlabeled) => return Err(EatError::Data("evaluation manifest has no labels".into())),
        (TaskKind::SingleLabel, TaskKind::Multilabel) => {
            return Err(EatError::Data(
                "task mismatch: multilabel manifest for a single-label checkpoint".into(),
            ))
        }
        _ => {}
    }
    let cfg = &ckpt.meta.config;
    let vocab = &ckpt.meta.vocabulary;
    let targets = manifest.targets(vocab)?;
    let inputs = load_inputs(manifest, &cfg.frontend, ckpt.meta.norm, cfg.target_frames, workers)?;
    let logits = predict_all(&ckpt.params, &cfg.model, &inputs, cfg.prediction_mode)?;
    score(task, vocab, cfg.prediction_mode, &logits, &targets)
}
