//! Student, teacher and classifier wiring over the building blocks.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::bootstrap::ema_update;
use crate::decoder::{decode, init_decoder, merge_tokens, select_masked, DecoderConfig};
use crate::encoder::{encode, encode_frozen, init_encoder, trunc_normal, EncoderConfig, Mode, INIT_STD};
use crate::error::{EatError, Result};
use crate::masking::MaskPlan;
use crate::numerics::{Bound, ParamSet, Tape, Tensor, Var};
use crate::objective::{build_targets, multi_clone_loss, ufo, TeacherTarget, UfoVars};
use crate::patching::{patch_embed, patch_embed_on, patchify, positional_table, Grid, PatchConfig, PatchGrid};
use crate::rng::{derive_seed, stream, Purpose};

pub const PATCH_WEIGHT: &str = "patch_embed.weight";
pub const PATCH_BIAS: &str = "patch_embed.bias";
pub const ENCODER: &str = "encoder.";
pub const DECODER: &str = "decoder.";
pub const CLS_TOKEN: &str = "cls_token";
pub const MASK_TOKEN: &str = "mask_token";
pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";
/// Teacher parameter names are student names under this prefix.
pub const TEACHER: &str = "teacher.";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub encoder: EncoderConfig,
    pub decoder_layers: usize,
    pub decoder_kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_size: 16,
            encoder: EncoderConfig::default(),
            decoder_layers: 6,
            decoder_kernel: 3,
        }
    }
}

impl ModelConfig {
    pub fn embed_dim(&self) -> usize {
        self.encoder.embed_dim
    }

    pub fn patch(&self) -> PatchConfig {
        PatchConfig {
            patch_size: self.patch_size,
            embed_dim: self.embed_dim(),
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            layers: self.decoder_layers,
            kernel: self.decoder_kernel,
            embed_dim: self.embed_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(EatError::Config("patch_size must be positive".into()));
        }
        self.encoder.validate()?;
        self.decoder().validate()
    }
}

/// Fresh student parameters: patch embedding, encoder, CLS and mask tokens, decoder.
pub fn init_student(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let (e, s) = (cfg.embed_dim(), cfg.patch_size);
    let mut rng = stream(seed, Purpose::Init, &[0]);
    let mut ps = ParamSet::new();
    ps.insert(PATCH_WEIGHT, trunc_normal(&mut rng, vec![e, 1, s, s], INIT_STD));
    ps.insert(PATCH_BIAS, Tensor::zeros(vec![e]));
    ps.insert(CLS_TOKEN, trunc_normal(&mut rng, vec![1, e], INIT_STD));
    ps.insert(MASK_TOKEN, trunc_normal(&mut rng, vec![1, e], INIT_STD));
    init_encoder(&mut ps, ENCODER, &cfg.encoder, &mut rng)?;
    init_decoder(&mut ps, DECODER, &cfg.decoder(), &mut rng)?;
    Ok(ps)
}

/// Adds a zero-bias linear classifier over `classes` outputs.
pub fn init_head(params: &mut ParamSet, embed_dim: usize, classes: usize, seed: u64) -> Result<()> {
    if classes == 0 {
        return Err(EatError::Config("classifier needs at least one class".into()));
    }
    let mut rng = stream(seed, Purpose::Init, &[1]);
    params.insert(HEAD_WEIGHT, trunc_normal(&mut rng, vec![classes, embed_dim], INIT_STD));
    params.insert(HEAD_BIAS, Tensor::zeros(vec![classes]));
    Ok(())
}

pub fn is_head(name: &str) -> bool {
    name.starts_with("head.")
}

/// Spectrogram cut into patch rows, ready for embedding on any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipInput {
    /// `[P, S·S]`
    pub patches: Tensor,
    pub grid: Grid,
}

impl ClipInput {
    pub fn new(values: &Tensor, patch_size: usize) -> Result<Self> {
        let (patches, grid) = patchify(values, patch_size)?;
        Ok(Self { patches, grid })
    }
}

/// Patch embeddings plus the positional table, `[P, E]`, on `tape`.
pub fn embed_on(tape: &mut Tape, params: &Bound, prefix: &str, clip: &ClipInput, embed_dim: usize) -> Result<Var> {
    let w = params.var(&format!("{prefix}{PATCH_WEIGHT}"))?;
    let b = params.var(&format!("{prefix}{PATCH_BIAS}"))?;
    let emb = patch_embed_on(tape, &clip.patches, w, b)?;
    let pos = tape.constant(positional_table(clip.grid.cells(), embed_dim));
    Ok(tape.add(emb, pos)?)
}

/// EMA copy of the student's patch embedding and encoder. Counts its forwards.
#[derive(Debug)]
pub struct Teacher {
    params: ParamSet,
    forwards: AtomicU64,
}

impl Clone for Teacher {
    fn clone(&self) -> Self {
        Self {
            params: self.params.clone(),
            forwards: AtomicU64::new(self.forward_count()),
        }
    }
}

impl Teacher {
    /// Exact copy of the relevant student parameters.
    pub fn from_student(student: &ParamSet) -> Self {
        let params = student
            .filter_prefix(&["patch_embed.", ENCODER])
            .iter()
            .map(|(n, t)| (format!("{TEACHER}{n}"), t.clone()))
            .collect();
        Self::from_params(params)
    }

    pub fn from_params(params: ParamSet) -> Self {
        Self {
            params,
            forwards: AtomicU64::new(0),
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn forward_count(&self) -> u64 {
        self.forwards.load(Ordering::Relaxed)
    }

    /// Restores the counter, e.g. when resuming from a checkpoint.
    pub fn set_forward_count(&self, n: u64) {
        self.forwards.store(n, Ordering::Relaxed);
    }

    pub fn update(&mut self, student: &ParamSet, tau: f64) -> Result<()> {
        ema_update(&mut self.params, student, TEACHER, tau)
    }

    /// Eval-mode forward over the full positional-encoded grid (no CLS), then
    /// layer-averaged targets. Runs outside any student tape.
    pub fn targets(&self, cfg: &ModelConfig, values: &Tensor) -> Result<TeacherTarget> {
        self.forwards.fetch_add(1, Ordering::Relaxed);
        let get = |n: &str| {
            self.params
                .get(&format!("{TEACHER}{n}"))
                .ok_or_else(|| EatError::Invalid(format!("teacher is missing `{n}`")))
        };
        let grid: PatchGrid = patch_embed(values, get(PATCH_WEIGHT)?, get(PATCH_BIAS)?)?.add_positional()?;
        let (_, layers) = encode_frozen(&self.params, &format!("{TEACHER}{ENCODER}"), &cfg.encoder, &grid.embeddings)?;
        if layers.is_empty() {
            return Err(EatError::Config("teacher needs at least one encoder layer".into()));
        }
        build_targets(&layers)
    }
}

/// Student loss of one clip over its clone set.
#[derive(Debug, Clone)]
pub struct StudentLoss {
    /// Clone-mean objective.
    pub total: Var,
    pub per_clone: Vec<UfoVars>,
}

/// Runs the student once per clone plan on `tape` and averages the objective.
/// The patch embedding is computed once and shared by all clones. In training
/// mode, clone `k` draws its stochastic regularizers from `(seed, k)`.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_loss(
    tape: &mut Tape,
    params: &Bound,
    cfg: &ModelConfig,
    clip: &ClipInput,
    target: &TeacherTarget,
    plans: &[MaskPlan],
    lambda: f64,
    mode: Mode,
) -> Result<StudentLoss> {
    let e = cfg.embed_dim();
    if target.y_a.shape() != [clip.grid.cells(), e] {
        return Err(EatError::Invalid(format!(
            "target {:?} does not match grid {} and width {e}",
            target.y_a.shape(),
            clip.grid
        )));
    }
    let x = embed_on(tape, params, "", clip, e)?;
    let cls = params.var(CLS_TOKEN)?;
    let mask_token = params.var(MASK_TOKEN)?;
    let mut per_clone = Vec::with_capacity(plans.len());
    for (k, plan) in plans.iter().enumerate() {
        if plan.grid != clip.grid {
            return Err(EatError::Invalid(format!("mask grid {} vs clip grid {}", plan.grid, clip.grid)));
        }
        let visible = plan.visible_indices();
        let masked = plan.masked_indices();
        let vis = tape.gather_rows(x, &visible)?;
        let seq = tape.concat_rows(&[cls, vis])?;
        let clone_mode = match mode {
            Mode::Eval => Mode::Eval,
            Mode::Train { seed } => Mode::Train {
                seed: derive_seed(seed, Purpose::DropPath, &[k as u64]),
            },
        };
        let out = encode(tape, params, ENCODER, &cfg.encoder, seq, clone_mode)?.output;
        let c_prime = tape.gather_rows(out, &[0])?;
        let rows: Vec<usize> = (1..=visible.len()).collect();
        let vis_out = tape.gather_rows(out, &rows)?;
        let merged = merge_tokens(tape, vis_out, &visible, &masked, mask_token, clip.grid)?;
        let pred = decode(tape, params, DECODER, &cfg.decoder(), merged, clip.grid)?;
        let x_o = select_masked(tape, pred, &masked)?;
        let y_o = target.y_a.gather_rows(&masked)?;
        per_clone.push(ufo(tape, c_prime, &target.y_bar, x_o, &y_o, lambda)?);
    }
    let total = multi_clone_loss(tape, &per_clone)?;
    Ok(StudentLoss { total, per_clone })
}

/// Which encoder output feeds the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    Cls,
    Mean,
}

impl std::str::FromStr for PredictionMode {
    type Err = EatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(Self::Cls),
            "mean" | "mean_pool" => Ok(Self::Mean),
            other => Err(EatError::Config(format!("prediction mode must be cls or mean, got `{other}`"))),
        }
    }
}

impl std::fmt::Display for PredictionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Cls => "cls",
            Self::Mean => "mean",
        })
    }
}

/// Utterance feature `[1, E]`: the CLS output or the mean of the patch outputs.
pub fn utterance_feature(
    tape: &mut Tape,
    params: &Bound,
    cfg: &ModelConfig,
    clip: &ClipInput,
    prediction: PredictionMode,
    mode: Mode,
) -> Result<Var> {
    let x = embed_on(tape, params, "", clip, cfg.embed_dim())?;
    let cls = params.var(CLS_TOKEN)?;
    let seq = tape.concat_rows(&[cls, x])?;
    let out = encode(tape, params, ENCODER, &cfg.encoder, seq, mode)?.output;
    Ok(match prediction {
        PredictionMode::Cls => tape.gather_rows(out, &[0])?,
        PredictionMode::Mean => {
            let rows: Vec<usize> = (1..=clip.grid.cells()).collect();
            let patches = tape.gather_rows(out, &rows)?;
            tape.mean_rows(patches)?
        }
    })
}

/// Class logits `[1, C]`.
pub fn classify(
    tape: &mut Tape,
    params: &Bound,
    cfg: &ModelConfig,
    clip: &ClipInput,
    prediction: PredictionMode,
    mode: Mode,
) -> Result<Var> {
    let feat = utterance_feature(tape, params, cfg, clip, prediction, mode)?;
    Ok(tape.linear(feat, params.var(HEAD_WEIGHT)?, Some(params.var(HEAD_BIAS)?))?)
}

/// Eval-mode logits as a plain vector.
pub fn predict(params: &ParamSet, cfg: &ModelConfig, clip: &ClipInput, prediction: PredictionMode) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let b = params.bind_frozen(&mut tape);
    let logits = classify(&mut tape, &b, cfg, clip, prediction, Mode::Eval)?;
    Ok(tape.value(logits).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{make_clone_set, BlockShape};
    use crate::numerics::finite_difference_check;

    fn tiny() -> ModelConfig {
        ModelConfig {
            patch_size: 2,
            encoder: EncoderConfig {
                layers: 2,
                embed_dim: 8,
                heads: 2,
                mlp_ratio: 2.0,
                droppath_rate: 0.0,
                dropout: 0.0,
            },
            decoder_layers: 2,
            decoder_kernel: 3,
        }
    }

    fn spec(t: usize, f: usize, phase: f64) -> Tensor {
        Tensor::from_fn(vec![t, f], |i| (i as f64 * 0.37 + phase).sin())
    }

    #[test]
    fn teacher_starts_as_student_copy_and_counts() {
        let cfg = tiny();
        let s = init_student(&cfg, 0).unwrap();
        let t = Teacher::from_student(&s);
        assert!(t.params().names().all(|n| n.starts_with(TEACHER)));
        for (n, v) in t.params().iter() {
            assert_eq!(s.get(&n[TEACHER.len()..]).unwrap(), v);
        }
        assert!(t.params().get("teacher.cls_token").is_none());
        assert!(t.params().get("teacher.decoder.proj.weight").is_none());
        t.targets(&cfg, &spec(8, 8, 0.0)).unwrap();
        t.targets(&cfg, &spec(8, 8, 1.0)).unwrap();
        assert_eq!(t.forward_count(), 2);
    }

    #[test]
    fn gradient_has_no_teacher_entries_and_matches_fd() {
        let cfg = tiny();
        let mut student = init_student(&cfg, 1).unwrap();
        for (_, t) in student.iter_mut() {
            let noise = Tensor::from_fn(t.shape().to_vec(), |i| ((i * 31 + 7) % 17) as f64 / 40.0 - 0.2);
            *t = t.add(&noise).unwrap();
        }
        let teacher = Teacher::from_student(&student);
        let values = spec(8, 8, 0.3);
        let target = teacher.targets(&cfg, &values).unwrap();
        let clip = ClipInput::new(&values, 2).unwrap();
        let plans = make_clone_set(clip.grid, 0.6, &[BlockShape::new(2, 2)], 2, 9).unwrap().clones;

        let mut tape = Tape::new();
        let b = student.bind(&mut tape, |_| true).unwrap();
        let loss = pretrain_loss(&mut tape, &b, &cfg, &clip, &target, &plans, 1.0, Mode::Eval).unwrap();
        let grads = tape.backward(loss.total).unwrap();
        assert!(grads.params().keys().all(|n| !n.starts_with(TEACHER)));
        assert_eq!(grads.params().len(), student.len());

        let report = finite_difference_check(
            |tape, b| {
                Ok::<_, EatError>(pretrain_loss(tape, b, &cfg, &clip, &target, &plans, 1.0, Mode::Eval)?.total)
            },
            &student,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn classifier_modes_and_head_only_gradients() {
        let cfg = tiny();
        let mut ps = init_student(&cfg, 2).unwrap();
        init_head(&mut ps, 8, 3, 2).unwrap();
        let clip = ClipInput::new(&spec(8, 4, 0.0), 2).unwrap();
        for mode in [PredictionMode::Cls, PredictionMode::Mean] {
            assert_eq!(predict(&ps, &cfg, &clip, mode).unwrap().len(), 3);
        }
        let mut tape = Tape::new();
        let b = ps.bind(&mut tape, is_head).unwrap();
        let logits = classify(&mut tape, &b, &cfg, &clip, PredictionMode::Cls, Mode::Eval).unwrap();
        let loss = tape.soft_cross_entropy(logits, Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap()).unwrap();
        let g = tape.backward(loss).unwrap();
        let names: Vec<&String> = g.params().keys().collect();
        assert_eq!(names, ["head.bias", "head.weight"]);
    }

    #[test]
    fn prediction_mode_parsing() {
        assert_eq!("cls".parse::<PredictionMode>().unwrap(), PredictionMode::Cls);
        assert_eq!("mean".parse::<PredictionMode>().unwrap(), PredictionMode::Mean);
        assert!("max".parse::<PredictionMode>().is_err());
    }
}
