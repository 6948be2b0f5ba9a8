use rayon::prelude::*;

use super::{mel_spectrogram, read_wav, resample, FrontendConfig, NormStats, Spectrogram};
use crate::error::{EatError, Result};
use crate::pipeline::manifest::Manifest;

/// Streaming mean and variance. States from separate workers combine with
/// [`Welford::merge`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Welford {
    count: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn extend(&mut self, xs: &[f64]) {
        xs.iter().for_each(|&x| self.push(x));
    }

    pub fn merge(&self, other: &Welford) -> Welford {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let count = self.count + other.count;
        let delta = other.mean - self.mean;
        let mean = self.mean + delta * other.count as f64 / count as f64;
        let m2 = self.m2 + other.m2 + delta * delta * (self.count as f64 * other.count as f64) / count as f64;
        Welford { count, mean, m2 }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0).sqrt()
        }
    }
}

/// Mean and population std over every cell of the given spectrograms.
pub fn corpus_stats<'a>(specs: impl IntoIterator<Item = &'a Spectrogram>) -> Result<NormStats> {
    let mut acc = Welford::new();
    for s in specs {
        let mut w = Welford::new();
        w.extend(s.values().data());
        acc = acc.merge(&w);
    }
    if acc.count() == 0 {
        return Err(EatError::Data("no spectrogram cells to compute statistics over".into()));
    }
    Ok(NormStats {
        mean: acc.mean(),
        std: acc.std(),
    })
}

/// Reads, resamples and converts one manifest entry to a raw log-mel spectrogram.
pub fn load_spectrogram(path: &std::path::Path, cfg: &FrontendConfig) -> Result<Spectrogram> {
    let clip = read_wav(path)?;
    let clip = resample(&clip, cfg.sample_rate)?;
    mel_spectrogram(&clip, cfg).map_err(|e| match e {
        EatError::Data(msg) => EatError::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Normalization statistics over the un-normalized spectrograms of a manifest.
/// Per-clip accumulators are computed in parallel and merged in manifest order.
pub fn compute_corpus_stats(manifest: &Manifest, cfg: &FrontendConfig) -> Result<NormStats> {
    if manifest.is_empty() {
        return Err(EatError::Data("manifest is empty".into()));
    }
    let parts: Vec<Welford> = manifest
        .rows()
        .par_iter()
        .map(|row| {
            let spec = load_spectrogram(&manifest.resolve(row), cfg)?;
            let mut w = Welford::new();
            w.extend(spec.values().data());
            Ok(w)
        })
        .collect::<Result<_>>()?;
    let total = parts.iter().fold(Welford::new(), |acc, w| acc.merge(w));
    Ok(NormStats {
        mean: total.mean(),
        std: total.std(),
    })
}
