//! EMA teacher updates, the τ and learning-rate schedules, and AdamW.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{EatError, Result};
use crate::numerics::{ParamSet, Tensor};

/// Linear τ ramp over optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauSchedule {
    pub start: f64,
    pub end: f64,
    pub total_steps: u64,
}

impl Default for TauSchedule {
    fn default() -> Self {
        Self {
            start: 0.999,
            end: 0.99999,
            total_steps: 1,
        }
    }
}

impl TauSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.start && self.start <= self.end && self.end <= 1.0) {
            return Err(EatError::Config(format!(
                "τ endpoints must satisfy 0 ≤ start ≤ end ≤ 1, got {} and {}",
                self.start, self.end
            )));
        }
        Ok(())
    }

    /// `start + (end − start)·step/total`. Steps past the end clamp with a warning.
    pub fn tau_at(&self, step: u64) -> f64 {
        if step > self.total_steps {
            log::warn!("τ requested at step {step} beyond schedule end {}; clamping", self.total_steps);
            return self.end;
        }
        if self.total_steps == 0 {
            return self.end;
        }
        self.start + (self.end - self.start) * step as f64 / self.total_steps as f64
    }
}

/// `θ_t ← τ·θ_t + (1 − τ)·θ_s` for every teacher entry. Teacher names are the
/// student names with `teacher_prefix` prepended.
pub fn ema_update(teacher: &mut ParamSet, student: &ParamSet, teacher_prefix: &str, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(EatError::Invalid(format!("τ must lie in [0, 1], got {tau}")));
    }
    for (name, t) in teacher.iter() {
        let s = name
            .strip_prefix(teacher_prefix)
            .and_then(|n| student.get(n))
            .ok_or_else(|| EatError::Invalid(format!("teacher parameter `{name}` has no student counterpart")))?;
        if s.shape() != t.shape() {
            return Err(EatError::Invalid(format!(
                "teacher `{name}` {:?} vs student {:?}",
                t.shape(),
                s.shape()
            )));
        }
    }
    for (name, t) in teacher.iter_mut() {
        let s = student.get(&name[teacher_prefix.len()..]).expect("checked above");
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = tau * *tv + (1.0 - tau) * sv;
        }
    }
    Ok(())
}

/// Linear warmup to `peak`, then cosine decay to `min` at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub min: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        let progress = if span == 0 {
            1.0
        } else {
            ((step - self.warmup_steps) as f64 / span as f64).min(1.0)
        };
        self.min + 0.5 * (self.peak - self.min) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Whether a parameter receives weight decay. Biases, norm parameters and
/// learned tokens are exempt.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.contains("norm") || name.ends_with("_token"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Moment estimates per parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One decoupled-decay Adam step over the parameters that have a gradient.
    /// A non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(EatError::NonFiniteGradient(name.clone()));
            }
            let p = params
                .get(name)
                .ok_or_else(|| EatError::Invalid(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(EatError::Invalid(format!(
                    "gradient {:?} does not match parameter `{name}` {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let decay = if decays(name) { lr * weight_decay } else { 0.0 };
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                pd[i] -= decay * pd[i];
                md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                pd[i] -= lr * (md[i] / c1) / ((vd[i] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Euclidean norm over every gradient entry, accumulated in name order.
pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads.values().map(|g| g.sum_squares()).sum::<f64>().sqrt()
}

/// Rescales so the global norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            *g = g.scale(s);
        }
    }
    norm
}
