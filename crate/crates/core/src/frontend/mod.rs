//! Waveform to normalized, padded log-mel spectrogram.

mod resample;
mod stats;
mod wav;

use std::sync::Arc;

use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{EatError, Result};
use crate::numerics::Tensor;

pub use resample::{resample, KAISER_BETA, RESAMPLE_TAPS};
pub use stats::{compute_corpus_stats, corpus_stats, load_spectrogram, Welford};
pub use wav::{read_wav, write_wav};

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(EatError::Invalid("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(EatError::Invalid("audio clip has no samples".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// STFT and mel filterbank settings. Defaults: 16 kHz, 25 ms Hann window,
/// 10 ms hop, 128 HTK mel bands over 0–8 kHz, natural log with a 1e-10 floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub window: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub mel_bins: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window: 400,
            hop: 160,
            n_fft: 512,
            mel_bins: 128,
            f_min: 0.0,
            f_max: 8_000.0,
            log_floor: 1e-10,
        }
    }
}

impl FrontendConfig {
    /// `floor((n − window) / hop) + 1`, or 0 if the clip is shorter than a window.
    pub fn frame_count(&self, n_samples: usize) -> usize {
        if n_samples < self.window {
            0
        } else {
            (n_samples - self.window) / self.hop + 1
        }
    }

    /// Smallest sample count that yields exactly `frames` frames.
    pub fn samples_for_frames(&self, frames: usize) -> usize {
        (frames.max(1) - 1) * self.hop + self.window
    }
}

/// Corpus statistics used by [`normalize`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    /// AudioSet statistics, used when a config does not supply its own.
    pub const AUDIOSET: NormStats = NormStats {
        mean: -4.268,
        std: 4.569,
    };
}

/// A `frames × bins` log-mel array.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    values: Tensor,
    pub frame_shift_ms: f64,
    pub window_ms: f64,
    normalization: Option<NormStats>,
}

impl Spectrogram {
    pub fn from_values(values: Tensor, frame_shift_ms: f64, window_ms: f64) -> Result<Self> {
        values
            .dims2("spectrogram")
            .map_err(|e| EatError::Invalid(e.to_string()))?;
        Ok(Self {
            values,
            frame_shift_ms,
            window_ms,
            normalization: None,
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn bins(&self) -> usize {
        self.values.shape()[1]
    }

    /// Statistics this spectrogram was normalized with, if any.
    pub fn normalization(&self) -> Option<NormStats> {
        self.normalization
    }

    /// Value that [`pad_to_length`] appends. Normalized spectrograms pad with the
    /// normalized-domain zero, which is the corpus mean; raw ones pad with silence.
    pub fn pad_value(&self, cfg: &FrontendConfig) -> f64 {
        match self.normalization {
            Some(_) => 0.0,
            None => cfg.log_floor.ln(),
        }
    }

    pub fn with_values(&self, values: Tensor) -> Result<Self> {
        if values.shape() != self.values.shape() {
            return Err(EatError::Invalid(format!(
                "replacement values {:?} do not match spectrogram {:?}",
                values.shape(),
                self.values.shape()
            )));
        }
        Ok(Self {
            values,
            ..self.clone()
        })
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-scale filters over the one-sided power spectrum.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `mel_bins × (n_fft/2 + 1)`, row-major.
    weights: Vec<f64>,
    fft_bins: usize,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &FrontendConfig) -> Self {
        let fft_bins = cfg.n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
        let edges: Vec<f64> = (0..cfg.mel_bins + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.mel_bins + 1) as f64))
            .collect();
        let mut weights = vec![0.0; cfg.mel_bins * fft_bins];
        for m in 0..cfg.mel_bins {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..fft_bins {
                let f = k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
                let rising = (f - left) / (center - left);
                let falling = (right - f) / (right - center);
                weights[m * fft_bins + k] = rising.min(falling).max(0.0);
            }
        }
        Self {
            weights,
            fft_bins,
            centers_hz: edges[1..=cfg.mel_bins].to_vec(),
        }
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.fft_bins..(m + 1) * self.fft_bins]
    }

    pub fn fft_bins(&self) -> usize {
        self.fft_bins
    }

    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            *o = self.row(m).iter().zip(power).map(|(w, p)| w * p).sum();
        }
    }
}

/// Reusable STFT + filterbank state for one [`FrontendConfig`].
pub struct MelExtractor {
    cfg: FrontendConfig,
    bank: MelFilterbank,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl MelExtractor {
    pub fn new(cfg: &FrontendConfig) -> Result<Self> {
        if cfg.window == 0 || cfg.hop == 0 || cfg.n_fft < cfg.window || cfg.mel_bins == 0 {
            return Err(EatError::Config(format!("invalid frontend settings {cfg:?}")));
        }
        let n = cfg.window;
        // symmetric Hann
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            bank: MelFilterbank::new(cfg),
            window,
            fft: FftPlanner::new().plan_fft_forward(cfg.n_fft),
        })
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    /// Log-mel spectrogram of a clip already at the configured sample rate.
    pub fn compute(&self, clip: &AudioClip) -> Result<Spectrogram> {
        let cfg = &self.cfg;
        if clip.sample_rate != cfg.sample_rate {
            return Err(EatError::Invalid(format!(
                "clip is at {} Hz, frontend expects {} Hz",
                clip.sample_rate, cfg.sample_rate
            )));
        }
        let frames = cfg.frame_count(clip.samples.len());
        if frames == 0 {
            return Err(EatError::Data(format!(
                "clip of {} samples is shorter than one {}-sample window",
                clip.samples.len(),
                cfg.window
            )));
        }
        let fft_bins = self.bank.fft_bins();
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let mut power = vec![0.0; fft_bins];
        let mut out = vec![0.0; frames * cfg.mel_bins];
        for t in 0..frames {
            let start = t * cfg.hop;
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (i, (b, &w)) in buf.iter_mut().zip(&self.window).enumerate() {
                b.re = clip.samples[start + i] * w;
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            let row = &mut out[t * cfg.mel_bins..(t + 1) * cfg.mel_bins];
            self.bank.apply(&power, row);
            for v in row.iter_mut() {
                *v = v.max(cfg.log_floor).ln();
            }
        }
        Spectrogram::from_values(
            Tensor::new(vec![frames, cfg.mel_bins], out)?,
            cfg.hop as f64 * 1000.0 / cfg.sample_rate as f64,
            cfg.window as f64 * 1000.0 / cfg.sample_rate as f64,
        )
    }
}

/// One-shot log-mel spectrogram; see [`MelExtractor`] for repeated use.
pub fn mel_spectrogram(clip: &AudioClip, cfg: &FrontendConfig) -> Result<Spectrogram> {
    MelExtractor::new(cfg)?.compute(clip)
}

/// Appends frames at the end of the time axis up to exactly `target_frames`.
pub fn pad_to_length(spec: &Spectrogram, target_frames: usize, cfg: &FrontendConfig) -> Result<Spectrogram> {
    let (t, f) = (spec.frames(), spec.bins());
    if target_frames < t {
        return Err(EatError::Invalid(format!(
            "cannot pad {t} frames to {target_frames}; padding never truncates"
        )));
    }
    let mut data = spec.values.data().to_vec();
    data.resize(target_frames * f, spec.pad_value(cfg));
    Ok(Spectrogram {
        values: Tensor::new(vec![target_frames, f], data)?,
        ..spec.clone()
    })
}

/// `(x − mean) / (2·std)`: a corpus with these statistics ends up with mean 0 and
/// standard deviation 0.5.
pub fn normalize(spec: &Spectrogram, mean: f64, std: f64) -> Result<Spectrogram> {
    if std <= 0.0 || !std.is_finite() {
        return Err(EatError::Invalid(format!(
            "normalization std must be positive, got {std}"
        )));
    }
    if spec.normalization.is_some() {
        return Err(EatError::Invalid("spectrogram is already normalized".into()));
    }
    Ok(Spectrogram {
        values: spec.values.map(|x| (x - mean) / (2.0 * std)),
        normalization: Some(NormStats { mean, std }),
        ..spec.clone()
    })
}

/// Inverse of [`normalize`].
pub fn denormalize(spec: &Spectrogram) -> Result<Spectrogram> {
    let NormStats { mean, std } = spec
        .normalization
        .ok_or_else(|| EatError::Invalid("spectrogram is not normalized".into()))?;
    Ok(Spectrogram {
        values: spec.values.map(|x| x * 2.0 * std + mean),
        normalization: None,
        ..spec.clone()
    })
}
