//! Synthetic corpora for smoke runs and examples.
//!
//! Pre-training clips are sums of enveloped harmonic tones over faint noise, so
//! neighbouring patches are predictable from context. Classification clips are
//! one jittered tone per class.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{EatError, Result};
use crate::frontend::{write_wav, AudioClip};
use crate::rng::{stream, Purpose};

use super::manifest::{Manifest, ManifestRow};

/// 20 720 samples at 16 kHz give exactly 128 frames.
pub const SMOKE_SAMPLES: usize = 20_720;

/// One tone partial with a linear attack and release.
fn add_tone(out: &mut [f64], sr: f64, freq: f64, amp: f64, start: usize, end: usize, harmonics: usize, phase: f64) {
    let ramp = ((end - start) / 8).max(1);
    for (n, s) in out.iter_mut().enumerate().take(end).skip(start) {
        let env = ((n - start).min(end - 1 - n) as f64 / ramp as f64).min(1.0);
        let t = n as f64 / sr;
        let mut v = 0.0;
        for h in 1..=harmonics {
            let f = freq * h as f64;
            if f < sr / 2.0 {
                v += (TAU * f * t + phase * h as f64).sin() / h as f64;
            }
        }
        *s += amp * env * v;
    }
}

fn add_noise(out: &mut [f64], level: f64, rng: &mut impl Rng) {
    for s in out.iter_mut() {
        *s += level * rng.sample::<f64, _>(StandardNormal);
    }
}

/// An unlabeled clip of `samples` samples: two to four harmonic events at random
/// pitch, onset and duration.
pub fn event_clip(samples: usize, sample_rate: u32, rng: &mut impl Rng) -> Result<AudioClip> {
    let sr = sample_rate as f64;
    let mut out = vec![0.0; samples];
    for _ in 0..rng.random_range(2..=4) {
        let freq = 150.0 * 2f64.powf(rng.random_range(0.0..4.0));
        let len = rng.random_range(samples / 4..=samples / 2 + 1).min(samples);
        let start = rng.random_range(0..=samples - len);
        let harmonics = rng.random_range(1..=4);
        let amp = rng.random_range(0.03..0.1);
        add_tone(&mut out, sr, freq, amp, start, start + len, harmonics, rng.random_range(0.0..TAU));
    }
    add_noise(&mut out, 0.003, rng);
    AudioClip::new(out, sample_rate)
}

/// A clip holding one pure tone near `freq` (±3 %) at random level and phase
/// over faint noise.
pub fn tone_clip(freq: f64, samples: usize, sample_rate: u32, rng: &mut impl Rng) -> Result<AudioClip> {
    let f = freq * rng.random_range(0.97..1.03);
    let amp = rng.random_range(0.1..0.5);
    let mut out = vec![0.0; samples];
    add_tone(&mut out, sample_rate as f64, f, amp, 0, samples, 1, rng.random_range(0.0..TAU));
    add_noise(&mut out, 0.01, rng);
    AudioClip::new(out, sample_rate)
}

fn write_all(dir: &Path, clips: Vec<(String, AudioClip, Vec<String>)>, manifest_name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| EatError::io(dir, e))?;
    let mut rows = Vec::with_capacity(clips.len());
    for (name, clip, labels) in clips {
        write_wav(&dir.join(&name), &clip)?;
        rows.push(ManifestRow {
            path: name.into(),
            labels,
        });
    }
    let path = dir.join(manifest_name);
    Manifest::new(rows, dir).save(&path)?;
    Ok(path)
}

/// Writes `n` unlabeled event clips plus `pretrain.csv` into `dir`.
pub fn write_pretrain_corpus(dir: &Path, n: usize, samples: usize, seed: u64) -> Result<PathBuf> {
    let clips = (0..n)
        .map(|i| {
            let mut rng = stream(seed, Purpose::Synth, &[0, i as u64]);
            Ok((format!("event_{i:04}.wav"), event_clip(samples, 16_000, &mut rng)?, vec![]))
        })
        .collect::<Result<Vec<_>>>()?;
    write_all(dir, clips, "pretrain.csv")
}

/// Paths of the train and held-out manifests of a tone-classification set.
#[derive(Debug, Clone)]
pub struct ToneSplit {
    pub train: PathBuf,
    pub test: PathBuf,
}

/// Writes `per_class` training and `held_out` test clips for each frequency in
/// `freqs`. Labels are `tone_<hz>`.
pub fn write_tone_classes(
    dir: &Path,
    freqs: &[f64],
    per_class: usize,
    held_out: usize,
    samples: usize,
    seed: u64,
) -> Result<ToneSplit> {
    let make = |split: u64, count: usize, tag: &str| -> Result<Vec<_>> {
        let mut clips = Vec::new();
        for i in 0..count {
            for (k, &f) in freqs.iter().enumerate() {
                let mut rng = stream(seed, Purpose::Synth, &[1, split, k as u64, i as u64]);
                let clip = tone_clip(f, samples, 16_000, &mut rng)?;
                clips.push((format!("{tag}_{k}_{i:03}.wav"), clip, vec![format!("tone_{}", f.round() as u64)]));
            }
        }
        Ok(clips)
    };
    Ok(ToneSplit {
        train: write_all(dir, make(0, per_class, "train")?, "train.csv")?,
        test: write_all(dir, make(1, held_out, "test")?, "test.csv")?,
    })
}
