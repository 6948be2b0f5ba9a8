//! Fine-tuning augmentations on normalized `[T, F]` spectrograms.
//!
//! All take an explicit generator so that callers choose the stream. None of
//! them runs outside fine-tuning training mode.

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::error::{EatError, Result};
use crate::numerics::Tensor;

/// Result of one mixup draw.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixed {
    pub spec: Tensor,
    pub targets: Vec<f64>,
    /// Weight on the first input.
    pub m: f64,
}

/// Draws `m ~ Beta(alpha, alpha)`. `alpha == 0` disables mixup and returns 1.
pub fn mixup_weight(alpha: f64, rng: &mut impl Rng) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(EatError::Invalid(format!("mixup alpha must be non-negative, got {alpha}")));
    }
    if alpha == 0.0 {
        return Ok(1.0);
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| EatError::Invalid(format!("mixup: {e}")))?;
    Ok(beta.sample(rng))
}

/// `m·a + (1 − m)·b` for spectrograms and targets alike.
pub fn mix_with(a: &Tensor, b: &Tensor, ta: &[f64], tb: &[f64], m: f64) -> Result<Mixed> {
    if a.shape() != b.shape() || ta.len() != tb.len() {
        return Err(EatError::Invalid(format!(
            "mixup inputs differ: {:?}/{} vs {:?}/{}",
            a.shape(),
            ta.len(),
            b.shape(),
            tb.len()
        )));
    }
    let spec = a.zip_map(b, "mixup", |x, y| m * x + (1.0 - m) * y)?;
    let targets = ta.iter().zip(tb).map(|(x, y)| m * x + (1.0 - m) * y).collect();
    Ok(Mixed { spec, targets, m })
}

pub fn mixup(a: &Tensor, b: &Tensor, ta: &[f64], tb: &[f64], alpha: f64, rng: &mut impl Rng) -> Result<Mixed> {
    let m = mixup_weight(alpha, rng)?;
    let mut out = mix_with(a, b, ta, tb, m)?;
    if m == 1.0 {
        out.spec = a.clone();
        out.targets = ta.to_vec();
    }
    Ok(out)
}

/// One masked span per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecAugSpans {
    pub time: (usize, usize),
    pub freq: (usize, usize),
}

fn span(len: usize, frac: f64, rng: &mut impl Rng) -> (usize, usize) {
    let max = (frac * len as f64).floor() as usize;
    let width = rng.random_range(0..=max);
    let start = rng.random_range(0..=len - width);
    (start, width)
}

/// Fills one time span of width at most `time_frac·T` and one frequency span of
/// width at most `freq_frac·F` with `fill`. Widths are uniform on `[0, max]`.
pub fn specaug(
    spec: &Tensor,
    time_frac: f64,
    freq_frac: f64,
    fill: f64,
    rng: &mut impl Rng,
) -> Result<(Tensor, SpecAugSpans)> {
    for f in [time_frac, freq_frac] {
        if !(0.0..1.0).contains(&f) {
            return Err(EatError::Invalid(format!("specaug fraction must lie in [0, 1), got {f}")));
        }
    }
    let (t, fr) = spec.dims2("augment")?;
    let spans = SpecAugSpans {
        time: span(t, time_frac, rng),
        freq: span(fr, freq_frac, rng),
    };
    let mut out = spec.clone();
    let data = out.data_mut();
    for i in 0..t {
        let in_time = i >= spans.time.0 && i < spans.time.0 + spans.time.1;
        for j in 0..fr {
            if in_time || (j >= spans.freq.0 && j < spans.freq.0 + spans.freq.1) {
                data[i * fr + j] = fill;
            }
        }
    }
    Ok((out, spans))
}

/// Circular shift along time: output row `i` is input row `(i − offset) mod T`.
pub fn roll(spec: &Tensor, offset: usize) -> Result<Tensor> {
    let (t, f) = spec.dims2("augment")?;
    let mut out = Tensor::zeros(vec![t, f]);
    let src = spec.data();
    let dst = out.data_mut();
    for i in 0..t {
        let from = (i + t - offset % t) % t;
        dst[i * f..(i + 1) * f].copy_from_slice(&src[from * f..(from + 1) * f]);
    }
    Ok(out)
}

/// Rolls by an offset uniform on `[0, T)`.
pub fn random_roll(spec: &Tensor, rng: &mut impl Rng) -> Result<(Tensor, usize)> {
    let (t, _) = spec.dims2("augment")?;
    let offset = rng.random_range(0..t);
    Ok((roll(spec, offset)?, offset))
}

/// Adds white Gaussian noise at an SNR drawn uniformly from `snr_db` (in dB),
/// measured against the mean power of `spec`. Returns the SNR used.
pub fn add_noise(spec: &Tensor, snr_db: (f64, f64), rng: &mut impl Rng) -> Result<(Tensor, f64)> {
    let (lo, hi) = snr_db;
    if !(lo <= hi) {
        return Err(EatError::Invalid(format!("noise SNR range [{lo}, {hi}] is empty")));
    }
    let snr = if lo == hi { lo } else { rng.random_range(lo..hi) };
    let power = spec.sum_squares() / spec.numel().max(1) as f64;
    let sigma = (power / 10f64.powf(snr / 10.0)).sqrt();
    let mut out = spec.clone();
    for x in out.data_mut() {
        *x += sigma * rng.sample::<f64, _>(StandardNormal);
    }
    Ok((out, snr))
}
