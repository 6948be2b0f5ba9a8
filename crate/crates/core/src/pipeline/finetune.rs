//! Supervised fine-tuning: pre-trained encoder plus a linear head.
//!
//! The decoder and mask token are dropped. The head reads the CLS output or the
//! mean of the patch outputs. Augmentations and droppath run only here, in
//! training mode.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use crate::bootstrap::{clip_global_norm, global_norm, AdamW};
use crate::encoder::Mode;
use crate::error::{EatError, Result};
use crate::frontend::NormStats;
use crate::model::{classify, init_head, is_head, ClipInput, PredictionMode, DECODER, MASK_TOKEN};
use crate::numerics::{ParamSet, Tape, Tensor};
use crate::rng::{derive_seed, stream, Purpose};

use super::augment::{add_noise, mix_with, mixup_weight, random_roll, specaug};
use super::checkpoint::{Checkpoint, CheckpointMeta, Stage};
use super::config::{LossKind, TrainConfig};
use super::data::{default_workers, load_inputs};
use super::manifest::{Manifest, TaskKind};
use super::metrics::argmax;
use super::pretrain::{batch_indices, resolve_norm};
use super::records::{FinetuneRecord, RecordWriter};

/// Labelled, model-ready examples.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub inputs: Vec<Tensor>,
    /// Multi-hot rows over `vocabulary`.
    pub targets: Vec<Vec<f64>>,
    pub vocabulary: Vec<String>,
    pub task: TaskKind,
}

impl LabeledSet {
    pub fn new(inputs: Vec<Tensor>, targets: Vec<Vec<f64>>, vocabulary: Vec<String>, task: TaskKind) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return Err(EatError::Data(format!(
                "{} inputs vs {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        if task == TaskKind::Unlabeled {
            return Err(EatError::Data("fine-tuning needs labels".into()));
        }
        if targets.iter().any(|t| t.len() != vocabulary.len()) {
            return Err(EatError::Data("target width differs from the vocabulary".into()));
        }
        Ok(Self {
            inputs,
            targets,
            vocabulary,
            task,
        })
    }

    /// Loads `manifest` with the given front end settings. The vocabulary is
    /// the manifest's own unless `vocabulary` is given.
    pub fn load(
        manifest: &Manifest,
        cfg: &TrainConfig,
        norm: NormStats,
        vocabulary: Option<&[String]>,
        workers: usize,
    ) -> Result<Self> {
        let vocab = vocabulary.unwrap_or(manifest.vocabulary()).to_vec();
        let targets = manifest.targets(&vocab)?;
        let inputs = load_inputs(manifest, &cfg.frontend, norm, cfg.target_frames, workers)?;
        Self::new(inputs, targets, vocab, manifest.kind())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Inverse class frequency weight of each example: the sum over its labels
    /// of one over the label's count.
    pub fn sample_weights(&self) -> Vec<f64> {
        let c = self.vocabulary.len();
        let counts: Vec<f64> = (0..c).map(|k| self.targets.iter().map(|t| t[k]).sum()).collect();
        self.targets
            .iter()
            .map(|t| (0..c).filter(|&k| t[k] > 0.0).map(|k| 1.0 / counts[k]).sum())
            .collect()
    }
}

/// Drops the pre-training-only parts of a student and adds a fresh head.
pub fn finetune_params(pretrained: &ParamSet, embed_dim: usize, classes: usize, seed: u64) -> Result<ParamSet> {
    let mut params: ParamSet = pretrained
        .iter()
        .filter(|(n, _)| !n.starts_with(DECODER) && *n != MASK_TOKEN && !is_head(n))
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    init_head(&mut params, embed_dim, classes, seed)?;
    Ok(params)
}

pub struct Finetuner {
    cfg: TrainConfig,
    norm: NormStats,
    params: ParamSet,
    opt: AdamW,
    step: u64,
    data: LabeledSet,
    clips: Vec<ClipInput>,
    weights: Option<Vec<f64>>,
    loss: LossKind,
    deterministic: bool,
}

/// Picks the loss from the config, else BCE for multilabel and CE otherwise.
pub fn loss_kind(cfg: &TrainConfig, task: TaskKind) -> LossKind {
    cfg.loss_function.unwrap_or(match cfg.multilabel {
        Some(true) => LossKind::Bce,
        Some(false) => LossKind::Ce,
        None if task == TaskKind::Multilabel => LossKind::Bce,
        None => LossKind::Ce,
    })
}

impl Finetuner {
    /// The encoder shape in `cfg.model` must match `init`; regularization may differ.
    pub fn new(cfg: TrainConfig, norm: NormStats, init: &Checkpoint, data: LabeledSet) -> Result<Self> {
        cfg.validate()?;
        let (a, b) = (&cfg.model, &init.meta.config.model);
        let shape = |m: &crate::model::ModelConfig| {
            (m.patch_size, m.encoder.layers, m.encoder.embed_dim, m.encoder.heads, m.encoder.mlp_hidden())
        };
        if shape(a) != shape(b) {
            return Err(EatError::Config(format!(
                "config encoder {:?} does not match the initial checkpoint {:?}",
                a.encoder, b.encoder
            )));
        }
        let params = finetune_params(&init.params, cfg.model.embed_dim(), data.vocabulary.len(), cfg.seed)?;
        let clips = data
            .inputs
            .iter()
            .map(|x| ClipInput::new(x, cfg.model.patch_size))
            .collect::<Result<Vec<_>>>()?;
        let weights = cfg.weighted_sampling.then(|| data.sample_weights());
        Ok(Self {
            loss: loss_kind(&cfg, data.task),
            opt: AdamW::new(cfg.adamw()),
            cfg,
            norm,
            params,
            step: 0,
            data,
            clips,
            weights,
            deterministic: false,
        })
    }

    pub fn set_deterministic(&mut self, on: bool) {
        self.deterministic = on;
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn batch(&self) -> Vec<usize> {
        let b = self.cfg.batch_size;
        match &self.weights {
            None => batch_indices(self.cfg.seed, self.data.len(), b, self.step),
            Some(w) => {
                let total: f64 = w.iter().sum();
                let size = if self.cfg.weighted_sampling_size > 0 {
                    self.cfg.weighted_sampling_size as u64
                } else {
                    self.data.len() as u64
                };
                (0..b as u64)
                    .map(|j| {
                        let pos = self.step * b as u64 + j;
                        let mut rng = stream(self.cfg.seed, Purpose::Sampling, &[pos / size, pos % size]);
                        let mut u = rng.random_range(0.0..total);
                        w.iter()
                            .position(|&x| {
                                u -= x;
                                u < 0.0
                            })
                            .unwrap_or(w.len() - 1)
                    })
                    .collect()
            }
        }
    }

    /// Roll, noise and SpecAug on one input, as configured.
    fn augment(&self, x: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
        let cfg = &self.cfg;
        let mut x = x.clone();
        if cfg.roll_augmentation {
            x = random_roll(&x, rng)?.0;
        }
        if cfg.noise_augmentation {
            x = add_noise(&x, (cfg.noise_snr_min, cfg.noise_snr_max), rng)?.0;
        }
        if cfg.specaug > 0.0 {
            x = specaug(&x, cfg.specaug, cfg.specaug, 0.0, rng)?.0;
        }
        Ok(x)
    }

    fn loss_on(&self, tape: &mut Tape, logits: crate::numerics::Var, target: &[f64]) -> Result<crate::numerics::Var> {
        let t = Tensor::new(vec![1, target.len()], target.to_vec())?;
        Ok(match self.loss {
            LossKind::Bce => tape.bce_with_logits(logits, t)?,
            LossKind::Ce => {
                let sum: f64 = target.iter().sum();
                let t = if sum > 0.0 { t.scale(1.0 / sum) } else { t };
                tape.soft_cross_entropy(logits, t)?
            }
            LossKind::Mse => {
                let c = tape.constant(t);
                tape.mse(logits, c)?
            }
        })
    }

    pub fn step(&mut self) -> Result<FinetuneRecord> {
        let started = Instant::now();
        let batch = self.batch();
        let seed = self.cfg.seed;
        let step = self.step;
        let mut inputs = Vec::with_capacity(batch.len());
        let mut rngs = Vec::with_capacity(batch.len());
        for (pos, &i) in batch.iter().enumerate() {
            let mut rng = stream(seed, Purpose::Augment, &[step, pos as u64]);
            inputs.push(self.augment(&self.data.inputs[i], &mut rng)?);
            rngs.push(rng);
        }
        // Each example mixes with the next one in the batch.
        let mut examples = Vec::with_capacity(batch.len());
        for (pos, &i) in batch.iter().enumerate() {
            let j = (pos + 1) % batch.len();
            let m = mixup_weight(self.cfg.mixup, &mut rngs[pos])?;
            let (x, t) = if m == 1.0 {
                (inputs[pos].clone(), self.data.targets[i].clone())
            } else {
                let mixed = mix_with(&inputs[pos], &inputs[j], &self.data.targets[i], &self.data.targets[batch[j]], m)?;
                (mixed.spec, mixed.targets)
            };
            let clip = if x == self.data.inputs[i] {
                self.clips[i].clone()
            } else {
                ClipInput::new(&x, self.cfg.model.patch_size)?
            };
            examples.push((clip, t));
        }
        let head_only = self.cfg.head_only;
        let results: Vec<(f64, bool, BTreeMap<String, Tensor>)> = examples
            .par_iter()
            .enumerate()
            .map(|(pos, (clip, target))| {
                let mut tape = Tape::new();
                let bound = self.params.bind(&mut tape, |n| !head_only || is_head(n))?;
                let mode = Mode::Train {
                    seed: derive_seed(seed, Purpose::DropPath, &[step, pos as u64]),
                };
                let logits = classify(&mut tape, &bound, &self.cfg.model, clip, self.cfg.prediction_mode, mode)?;
                let hit = argmax(tape.value(logits).data()) == argmax(target);
                let loss = self.loss_on(&mut tape, logits, target)?;
                let value = tape.value(loss).item();
                Ok((value, hit, tape.backward(loss)?.into_params()))
            })
            .collect::<Result<_>>()?;
        let n = results.len() as f64;
        let loss = results.iter().map(|r| r.0).sum::<f64>() / n;
        if !loss.is_finite() {
            return Err(EatError::NonFiniteLoss {
                step: step + 1,
                last_checkpoint: None,
            });
        }
        let hits = results.iter().filter(|r| r.1).count() as f64;
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for (_, _, g) in results {
            for (name, g) in g {
                match grads.get_mut(&name) {
                    Some(acc) => acc.add_assign(&g)?,
                    None => {
                        grads.insert(name, g);
                    }
                }
            }
        }
        for g in grads.values_mut() {
            *g = g.scale(1.0 / n);
        }
        let grad_norm = if self.cfg.grad_clip > 0.0 {
            clip_global_norm(&mut grads, self.cfg.grad_clip)
        } else {
            global_norm(&grads)
        };
        let lr = self.cfg.lr_schedule().lr_at(step);
        self.opt.step(&mut self.params, &grads, lr)?;
        self.step += 1;
        Ok(FinetuneRecord {
            step: self.step,
            loss,
            batch_accuracy: hits / n,
            lr,
            grad_norm,
            prediction_mode: self.cfg.prediction_mode.to_string(),
            wall_ms: if self.deterministic {
                0
            } else {
                started.elapsed().as_millis() as u64
            },
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                stage: Stage::Finetune,
                step: self.step,
                optimizer_step: self.opt.step,
                teacher_forwards: 0,
                config: self.cfg.clone(),
                norm: self.norm,
                vocabulary: self.data.vocabulary.clone(),
                task: Some(match self.cfg.multilabel {
                    Some(true) => TaskKind::Multilabel,
                    Some(false) => TaskKind::SingleLabel,
                    None => self.data.task,
                }),
            },
            params: self.params.clone(),
            teacher: ParamSet::new(),
            adam_m: self.opt.m.clone(),
            adam_v: self.opt.v.clone(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct FinetuneOptions {
    pub head_only: bool,
    pub prediction: Option<PredictionMode>,
    pub deterministic: bool,
    pub workers: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct FinetuneSummary {
    pub final_checkpoint: PathBuf,
    pub records: PathBuf,
    pub last: Option<FinetuneRecord>,
}

pub const FINETUNE_RECORDS_FILE: &str = "finetune_log.jsonl";

/// Runs fine-tuning end to end and writes the step log and `final.eat`.
pub fn finetune(
    mut cfg: TrainConfig,
    init: &Path,
    manifest_path: &Path,
    out_dir: &Path,
    opts: &FinetuneOptions,
) -> Result<FinetuneSummary> {
    cfg.head_only |= opts.head_only;
    if let Some(p) = opts.prediction {
        cfg.prediction_mode = p;
    }
    let init = Checkpoint::load(init)?;
    let manifest = Manifest::load(manifest_path)?;
    if manifest.kind() == TaskKind::Unlabeled {
        return Err(EatError::Data(format!("{}: fine-tuning needs labels", manifest_path.display())));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| EatError::io(out_dir, e))?;
    let norm = resolve_norm(&cfg, &manifest)?;
    let data = LabeledSet::load(&manifest, &cfg, norm, None, opts.workers.unwrap_or_else(default_workers))?;
    let records = out_dir.join(FINETUNE_RECORDS_FILE);
    let mut log = RecordWriter::create(&records)?;
    let mut tuner = Finetuner::new(cfg, norm, &init, data)?;
    tuner.set_deterministic(opts.deterministic);
    let (total, every) = (tuner.config().steps, tuner.config().checkpoint_every);
    let mut last = None;
    while tuner.step_count() < total {
        let rec = tuner.step()?;
        log.write(&rec)?;
        log::info!("step {} loss {:.5} batch acc {:.3}", rec.step, rec.loss, rec.batch_accuracy);
        if every > 0 && rec.step % every == 0 && rec.step < total {
            tuner.checkpoint().save(&out_dir.join(format!("step_{}.eat", rec.step)))?;
        }
        last = Some(rec);
    }
    let final_checkpoint = out_dir.join(super::pretrain::FINAL_CHECKPOINT);
    tuner.checkpoint().save(&final_checkpoint)?;
    Ok(FinetuneSummary {
        final_checkpoint,
        records,
        last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_student;

    #[test]
    fn inverse_frequency_weights() {
        let set = LabeledSet::new(
            vec![Tensor::zeros(vec![1, 1]); 4],
            vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
            vec!["a".into(), "b".into()],
            TaskKind::SingleLabel,
        )
        .unwrap();
        assert_eq!(set.sample_weights(), vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 1.0]);
    }

    #[test]
    fn head_replaces_decoder() {
        let cfg = TrainConfig::parse("embed_dim = 16\nheads = 2\nlayers = 1\ndecoder_layers = 1").unwrap();
        let student = init_student(&cfg.model, 0).unwrap();
        let p = finetune_params(&student, 16, 3, 0).unwrap();
        assert!(p.names().all(|n| !n.starts_with(DECODER) && n != MASK_TOKEN));
        assert_eq!(p.get("head.weight").unwrap().shape(), &[3, 16]);
        assert!(p.contains("cls_token"));
    }

    #[test]
    fn loss_selection() {
        let c = TrainConfig::default();
        assert_eq!(loss_kind(&c, TaskKind::Multilabel), LossKind::Bce);
        assert_eq!(loss_kind(&c, TaskKind::SingleLabel), LossKind::Ce);
        let c = TrainConfig::parse("loss_function = bce").unwrap();
        assert_eq!(loss_kind(&c, TaskKind::SingleLabel), LossKind::Bce);
    }
}
