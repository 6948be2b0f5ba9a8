//! Self-supervised pre-training loop.
//!
//! Per step and per clip: teacher targets on the full grid, a clone set of
//! masks, one student tape over all clones, backward. Gradients are averaged
//! over clones inside the loss and then over the clips of the batch. AdamW
//! follows, then the EMA update of the teacher.
//!
//! Every random draw is keyed by `(seed, step, batch position)`, and the batch
//! reduction runs in batch order, so a run is a pure function of its config,
//! seed and data. Resuming from a checkpoint continues the same sequence.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::bootstrap::{clip_global_norm, global_norm, AdamW};
use crate::encoder::Mode;
use crate::error::{EatError, Result};
use crate::frontend::{compute_corpus_stats, NormStats};
use crate::masking::make_clone_set;
use crate::model::{init_student, pretrain_loss, ClipInput, Teacher};
use crate::numerics::{Tape, Tensor};
use crate::objective::{mean_loss, UfoLoss};
use crate::rng::{derive_seed, stream, Purpose};

use super::checkpoint::{Checkpoint, CheckpointMeta, Stage};
use super::config::TrainConfig;
use super::data::{default_workers, load_inputs};
use super::manifest::Manifest;
use super::records::{RecordWriter, TrainRecord};

/// Positions `[step·B, (step+1)·B)` of the epoch-wise shuffled clip stream.
pub fn batch_indices(seed: u64, clips: usize, batch: usize, step: u64) -> Vec<usize> {
    let mut perm_epoch = u64::MAX;
    let mut perm: Vec<usize> = Vec::new();
    (0..batch as u64)
        .map(|b| {
            let pos = step * batch as u64 + b;
            let (epoch, j) = (pos / clips as u64, (pos % clips as u64) as usize);
            if epoch != perm_epoch {
                perm = (0..clips).collect();
                perm.shuffle(&mut stream(seed, Purpose::Shuffle, &[epoch]));
                perm_epoch = epoch;
            }
            perm[j]
        })
        .collect()
}

/// Per-clip result of one step.
struct ClipGrad {
    loss: UfoLoss,
    grads: BTreeMap<String, Tensor>,
}

pub struct Pretrainer {
    cfg: TrainConfig,
    norm: NormStats,
    student: crate::numerics::ParamSet,
    teacher: Teacher,
    opt: AdamW,
    step: u64,
    inputs: Vec<Tensor>,
    clips: Vec<ClipInput>,
    deterministic: bool,
    last_checkpoint: Option<PathBuf>,
}

impl Pretrainer {
    /// Fresh student from `cfg.seed`, teacher as an exact copy.
    pub fn new(cfg: TrainConfig, norm: NormStats, inputs: &[Tensor]) -> Result<Self> {
        cfg.validate()?;
        let student = init_student(&cfg.model, cfg.seed)?;
        let teacher = Teacher::from_student(&student);
        let opt = AdamW::new(cfg.adamw());
        Self::assemble(cfg, norm, student, teacher, opt, 0, inputs)
    }

    /// Continues the run stored in `ckpt` over the same data.
    pub fn from_checkpoint(ckpt: Checkpoint, inputs: &[Tensor]) -> Result<Self> {
        if ckpt.meta.stage != Stage::Pretrain {
            return Err(EatError::Config("resume needs a pre-training checkpoint".into()));
        }
        let mut opt = AdamW::new(ckpt.meta.config.adamw());
        opt.step = ckpt.meta.optimizer_step;
        opt.m = ckpt.adam_m;
        opt.v = ckpt.adam_v;
        let teacher = Teacher::from_params(ckpt.teacher);
        teacher.set_forward_count(ckpt.meta.teacher_forwards);
        Self::assemble(
            ckpt.meta.config,
            ckpt.meta.norm,
            ckpt.params,
            teacher,
            opt,
            ckpt.meta.step,
            inputs,
        )
    }

    fn assemble(
        cfg: TrainConfig,
        norm: NormStats,
        student: crate::numerics::ParamSet,
        teacher: Teacher,
        opt: AdamW,
        step: u64,
        inputs: &[Tensor],
    ) -> Result<Self> {
        if inputs.is_empty() {
            return Err(EatError::Data("pre-training needs at least one clip".into()));
        }
        let clips = inputs
            .iter()
            .map(|x| ClipInput::new(x, cfg.model.patch_size))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            norm,
            student,
            teacher,
            opt,
            step,
            inputs: inputs.to_vec(),
            clips,
            deterministic: false,
            last_checkpoint: None,
        })
    }

    /// Zeroes `wall_ms` so that logs compare byte for byte.
    pub fn set_deterministic(&mut self, on: bool) {
        self.deterministic = on;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn student(&self) -> &crate::numerics::ParamSet {
        &self.student
    }

    pub fn teacher(&self) -> &Teacher {
        &self.teacher
    }

    pub fn last_checkpoint(&self) -> Option<&Path> {
        self.last_checkpoint.as_deref()
    }

    fn clip_grad(&self, index: usize, pos: u64) -> Result<ClipGrad> {
        let cfg = &self.cfg;
        let clip = &self.clips[index];
        let target = self.teacher.targets(&cfg.model, &self.inputs[index])?;
        let mask_seed = derive_seed(cfg.seed, Purpose::Mask, &[self.step, pos]);
        let plans = make_clone_set(clip.grid, cfg.mask_ratio, &cfg.mask_blocks, cfg.clone_batch, mask_seed)?;
        let mut tape = Tape::new();
        let bound = self.student.bind(&mut tape, |_| true)?;
        let mode = Mode::Train {
            seed: derive_seed(cfg.seed, Purpose::DropPath, &[self.step, pos]),
        };
        let loss = pretrain_loss(
            &mut tape,
            &bound,
            &cfg.model,
            clip,
            &target,
            &plans.clones,
            cfg.utterance_weight,
            mode,
        )?;
        let per_clone: Vec<UfoLoss> = loss.per_clone.iter().map(|v| v.values(&tape)).collect();
        let grads = tape.backward(loss.total)?.into_params();
        Ok(ClipGrad {
            loss: mean_loss(&per_clone)?,
            grads,
        })
    }

    /// One optimizer step. Returns the record for the step just completed.
    pub fn step(&mut self) -> Result<TrainRecord> {
        let started = Instant::now();
        let batch = batch_indices(self.cfg.seed, self.clips.len(), self.cfg.batch_size, self.step);
        let results: Vec<ClipGrad> = batch
            .par_iter()
            .enumerate()
            .map(|(pos, &i)| self.clip_grad(i, pos as u64))
            .collect::<Result<_>>()?;
        let n = results.len() as f64;
        let losses: Vec<UfoLoss> = results.iter().map(|r| r.loss.clone()).collect();
        let loss = mean_loss(&losses)?;
        if !loss.l_ufo.is_finite() {
            return Err(EatError::NonFiniteLoss {
                step: self.step + 1,
                last_checkpoint: self.last_checkpoint.clone(),
            });
        }
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for r in results {
            for (name, g) in r.grads {
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
        let lr = self.cfg.lr_schedule().lr_at(self.step);
        let tau = self.cfg.tau().tau_at(self.step);
        self.opt.step(&mut self.student, &grads, lr)?;
        self.teacher.update(&self.student, tau)?;
        self.step += 1;
        Ok(TrainRecord {
            step: self.step,
            l_u: loss.l_u,
            l_f: loss.l_f,
            l_ufo: loss.l_ufo,
            lr,
            tau,
            grad_norm,
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
                stage: Stage::Pretrain,
                step: self.step,
                optimizer_step: self.opt.step,
                teacher_forwards: self.teacher.forward_count(),
                config: self.cfg.clone(),
                norm: self.norm,
                vocabulary: vec![],
                task: None,
            },
            params: self.student.clone(),
            teacher: self.teacher.params().clone(),
            adam_m: self.opt.m.clone(),
            adam_v: self.opt.v.clone(),
        }
    }

    pub fn save_checkpoint(&mut self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)?;
        self.last_checkpoint = Some(path.to_path_buf());
        Ok(())
    }
}

/// Options of the pre-training driver beyond the config file.
#[derive(Debug, Clone, Default)]
pub struct PretrainOptions {
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub resume: Option<PathBuf>,
    pub workers: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct PretrainSummary {
    pub final_checkpoint: PathBuf,
    pub records: PathBuf,
    pub steps: u64,
    pub last: Option<TrainRecord>,
    pub teacher_forwards: u64,
}

pub const RECORDS_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.eat";

/// Statistics from the config, or from the corpus when the config leaves them out.
pub fn resolve_norm(cfg: &TrainConfig, manifest: &Manifest) -> Result<NormStats> {
    match cfg.norm() {
        Some(n) => Ok(n),
        None => compute_corpus_stats(manifest, &cfg.frontend),
    }
}

/// Runs pre-training end to end, writing the step log, periodic checkpoints
/// `step_<n>.eat` and `final.eat` into `out_dir`.
pub fn pretrain(mut cfg: TrainConfig, manifest_path: &Path, out_dir: &Path, opts: &PretrainOptions) -> Result<PretrainSummary> {
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    let manifest = Manifest::load(manifest_path)?;
    std::fs::create_dir_all(out_dir).map_err(|e| EatError::io(out_dir, e))?;
    let workers = opts.workers.unwrap_or_else(default_workers);
    let resume = opts.resume.as_ref().map(|p| Checkpoint::load(p)).transpose()?;
    let norm = match &resume {
        Some(c) => c.meta.norm,
        None => resolve_norm(&cfg, &manifest)?,
    };
    let frontend = resume.as_ref().map_or(&cfg.frontend, |c| &c.meta.config.frontend).clone();
    let frames = resume.as_ref().map_or(cfg.target_frames, |c| c.meta.config.target_frames);
    let inputs = load_inputs(&manifest, &frontend, norm, frames, workers)?;
    let records = out_dir.join(RECORDS_FILE);
    let (mut trainer, mut log) = match resume {
        Some(c) => {
            let start = c.meta.step;
            (Pretrainer::from_checkpoint(c, &inputs)?, RecordWriter::append(&records, Some(start))?)
        }
        None => (Pretrainer::new(cfg, norm, &inputs)?, RecordWriter::create(&records)?),
    };
    trainer.set_deterministic(opts.deterministic);
    let total = trainer.config().steps;
    let every = trainer.config().checkpoint_every;
    let mut last = None;
    while trainer.step_count() < total {
        let rec = trainer.step()?;
        log.write(&rec)?;
        log::info!(
            "step {} l_ufo {:.5} l_f {:.5} l_u {:.5} lr {:.3e}",
            rec.step,
            rec.l_ufo,
            rec.l_f,
            rec.l_u,
            rec.lr
        );
        if every > 0 && rec.step % every == 0 && rec.step < total {
            trainer.save_checkpoint(&out_dir.join(format!("step_{}.eat", rec.step)))?;
        }
        last = Some(rec);
    }
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    trainer.save_checkpoint(&final_checkpoint)?;
    Ok(PretrainSummary {
        final_checkpoint,
        records,
        steps: trainer.step_count(),
        last,
        teacher_forwards: trainer.teacher().forward_count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch_once() {
        let n = 10;
        let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_indices(3, n, 2, s)).collect();
        seen.sort();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
        assert_eq!(batch_indices(3, n, 4, 2), batch_indices(3, n, 4, 2));
        let spill = batch_indices(3, n, 4, 2);
        assert_eq!(spill.len(), 4);
        assert_ne!(batch_indices(3, n, 10, 0), batch_indices(3, n, 10, 1));
    }
}
