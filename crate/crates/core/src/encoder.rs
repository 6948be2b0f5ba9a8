//! Pre-norm transformer encoder with per-block output capture.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{EatError, Result};
use crate::numerics::{Bound, ParamSet, Tape, Tensor, Var};
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub droppath_rate: f64,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            embed_dim: 64,
            heads: 4,
            mlp_ratio: 4.0,
            droppath_rate: 0.0,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(EatError::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.mlp_hidden() == 0 {
            return Err(EatError::Config(format!("mlp_ratio {} leaves no hidden units", self.mlp_ratio)));
        }
        for (name, r) in [("droppath", self.droppath_rate), ("dropout", self.dropout)] {
            if !(0.0..1.0).contains(&r) {
                return Err(EatError::Config(format!("{name} rate must lie in [0, 1), got {r}")));
            }
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }
}

/// Normal(0, std²) truncated to ±2·std by rejection.
pub fn trunc_normal(rng: &mut impl Rng, shape: impl Into<Vec<usize>>, std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break z * std;
        }
    })
}

pub const INIT_STD: f64 = 0.02;

fn block(prefix: &str, i: usize, name: &str) -> String {
    format!("{prefix}blocks.{i}.{name}")
}

/// Adds every encoder parameter under `prefix`. Projections get truncated-normal
/// weights, biases are zero, norm gains are one.
pub fn init_encoder(params: &mut ParamSet, prefix: &str, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    let (e, h) = (cfg.embed_dim, cfg.mlp_hidden());
    for i in 0..cfg.layers {
        let b = |n: &str| block(prefix, i, n);
        for norm in ["norm1", "norm2"] {
            params.insert(b(&format!("{norm}.weight")), Tensor::ones(vec![e]));
            params.insert(b(&format!("{norm}.bias")), Tensor::zeros(vec![e]));
        }
        for proj in ["q", "k", "v", "proj"] {
            params.insert(b(&format!("attn.{proj}.weight")), trunc_normal(rng, vec![e, e], INIT_STD));
        }
        for proj in ["q", "v", "proj"] {
            params.insert(b(&format!("attn.{proj}.bias")), Tensor::zeros(vec![e]));
        }
        params.insert(b("mlp.fc1.weight"), trunc_normal(rng, vec![h, e], INIT_STD));
        params.insert(b("mlp.fc1.bias"), Tensor::zeros(vec![h]));
        params.insert(b("mlp.fc2.weight"), trunc_normal(rng, vec![e, h], INIT_STD));
        params.insert(b("mlp.fc2.bias"), Tensor::zeros(vec![e]));
    }
    Ok(())
}

/// Whether stochastic regularizers are active. Training draws come from streams
/// keyed by `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

/// Stochastic depth for one sample's residual branch: zero with probability
/// `rate`, otherwise scaled by `1/(1 − rate)`. Identity in eval mode.
pub fn droppath(branch: &Tensor, rate: f64, training: bool, rng: &mut impl Rng) -> Tensor {
    match droppath_factor(rate, training, rng) {
        Some(s) if s == 1.0 => branch.clone(),
        Some(s) => branch.scale(s),
        None => Tensor::zeros(branch.shape().to_vec()),
    }
}

/// `None` if the branch is dropped, else its scale.
fn droppath_factor(rate: f64, training: bool, rng: &mut impl Rng) -> Option<f64> {
    if !training || rate == 0.0 {
        return Some(1.0);
    }
    if rng.random::<f64>() < rate {
        None
    } else {
        Some(1.0 / (1.0 - rate))
    }
}

/// Final sequence and the output of every block (the last equals `output`).
#[derive(Debug, Clone)]
pub struct Encoded {
    pub output: Var,
    pub layers: Vec<Var>,
}

fn dropout(tape: &mut Tape, x: Var, rate: f64, mode: Mode, coords: &[u64]) -> Var {
    let Mode::Train { seed } = mode else { return x };
    if rate == 0.0 {
        return x;
    }
    let mut rng = stream(seed, Purpose::Dropout, coords);
    let keep = 1.0 / (1.0 - rate);
    let mask = Tensor::from_fn(tape.value(x).shape().to_vec(), |_| {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            keep
        }
    });
    let m = tape.constant(mask);
    tape.mul(x, m).expect("mask has the shape of its input")
}

/// Adds `branch` to `x`, unless stochastic depth drops it.
fn residual(tape: &mut Tape, x: Var, branch: Var, rate: f64, mode: Mode, coords: &[u64]) -> Result<Var> {
    let factor = match mode {
        Mode::Eval => Some(1.0),
        Mode::Train { seed } => droppath_factor(rate, true, &mut stream(seed, Purpose::DropPath, coords)),
    };
    Ok(match factor {
        None => x,
        Some(s) if s == 1.0 => tape.add(x, branch)?,
        Some(s) => {
            let scaled = tape.scale(branch, s);
            tape.add(x, scaled)?
        }
    })
}

/// Runs the encoder over `x: [n, E]`.
pub fn encode(tape: &mut Tape, params: &Bound, prefix: &str, cfg: &EncoderConfig, x: Var, mode: Mode) -> Result<Encoded> {
    let (n, e) = tape.value(x).dims2("encode")?;
    if n == 0 || e != cfg.embed_dim {
        return Err(EatError::Invalid(format!(
            "encoder input [{n}, {e}] does not match embed_dim {}",
            cfg.embed_dim
        )));
    }
    let mut h = x;
    let mut layers = Vec::with_capacity(cfg.layers);
    for i in 0..cfg.layers {
        let p = |name: &str| params.var(&block(prefix, i, name));
        let li = i as u64;

        let y = tape.layer_norm(h, 1, Some(p("norm1.weight")?), Some(p("norm1.bias")?))?;
        let q = tape.linear(y, p("attn.q.weight")?, Some(p("attn.q.bias")?))?;
        let k = tape.linear(y, p("attn.k.weight")?, None)?;
        let v = tape.linear(y, p("attn.v.weight")?, Some(p("attn.v.bias")?))?;
        let a = tape.attention(q, k, v, cfg.heads)?;
        let a = tape.linear(a, p("attn.proj.weight")?, Some(p("attn.proj.bias")?))?;
        let a = dropout(tape, a, cfg.dropout, mode, &[li, 0]);
        h = residual(tape, h, a, cfg.droppath_rate, mode, &[li, 0])?;

        let y = tape.layer_norm(h, 1, Some(p("norm2.weight")?), Some(p("norm2.bias")?))?;
        let m = tape.linear(y, p("mlp.fc1.weight")?, Some(p("mlp.fc1.bias")?))?;
        let m = tape.gelu(m);
        let m = tape.linear(m, p("mlp.fc2.weight")?, Some(p("mlp.fc2.bias")?))?;
        let m = dropout(tape, m, cfg.dropout, mode, &[li, 1]);
        h = residual(tape, h, m, cfg.droppath_rate, mode, &[li, 1])?;

        layers.push(h);
    }
    Ok(Encoded { output: h, layers })
}

/// Eval-mode forward outside any training tape: returns the final output and
/// every block output as plain tensors.
pub fn encode_frozen(params: &ParamSet, prefix: &str, cfg: &EncoderConfig, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let enc = encode(&mut tape, &bound, prefix, cfg, xv, Mode::Eval)?;
    let layers = enc.layers.iter().map(|&v| tape.value(v).clone()).collect();
    Ok((tape.value(enc.output).clone(), layers))
}
