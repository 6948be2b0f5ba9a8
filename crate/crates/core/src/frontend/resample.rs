use std::f64::consts::PI;

use super::AudioClip;
use crate::error::{EatError, Result};

/// Total taps of the interpolation kernel.
pub const RESAMPLE_TAPS: usize = 64;
/// Kaiser window shape parameter.
pub const KAISER_BETA: f64 = 8.0;

/// Zeroth-order modified Bessel function of the first kind, by power series.
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / (k as f64 * k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Band-limited resampling with a Kaiser-windowed sinc kernel.
///
/// The output has `round(len · target / source)` samples. When downsampling, the
/// kernel cutoff moves to the target Nyquist frequency.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(EatError::Invalid("target sample rate must be positive".into()));
    }
    if target_rate == clip.sample_rate {
        return Ok(clip.clone());
    }
    let src = clip.sample_rate as f64;
    let dst = target_rate as f64;
    let ratio = src / dst;
    let cutoff = (dst / src).min(1.0);
    let out_len = (clip.samples.len() as f64 * dst / src).round() as usize;
    let half = (RESAMPLE_TAPS / 2) as i64;
    let norm = bessel_i0(KAISER_BETA);
    let x = &clip.samples;
    let samples = (0..out_len)
        .map(|n| {
            let t = n as f64 * ratio;
            let center = t.floor() as i64;
            let mut acc = 0.0;
            for j in (center - half + 1)..=(center + half) {
                if j < 0 || j as usize >= x.len() {
                    continue;
                }
                let d = t - j as f64;
                let u = d / half as f64;
                if u.abs() > 1.0 {
                    continue;
                }
                let window = bessel_i0(KAISER_BETA * (1.0 - u * u).sqrt()) / norm;
                acc += x[j as usize] * cutoff * sinc(cutoff * d) * window;
            }
            acc
        })
        .collect();
    AudioClip::new(samples, target_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, rate: u32, secs: f64) -> AudioClip {
        let n = (rate as f64 * secs) as usize;
        let s = (0..n)
            .map(|i| 0.5 * (2.0 * PI * freq * i as f64 / rate as f64).sin())
            .collect();
        AudioClip::new(s, rate).unwrap()
    }

    /// Index of the largest-magnitude bin of a direct DFT (oracle, O(n²)).
    fn dft_peak_hz(x: &[f64], rate: f64) -> f64 {
        let n = x.len();
        let (mut best, mut best_k) = (0.0, 0);
        for k in 1..n / 2 {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, &v) in x.iter().enumerate() {
                let a = -2.0 * PI * (k * i) as f64 / n as f64;
                re += v * a.cos();
                im += v * a.sin();
            }
            let mag = re * re + im * im;
            if mag > best {
                best = mag;
                best_k = k;
            }
        }
        best_k as f64 * rate / n as f64
    }

    #[test]
    fn same_rate_is_identity() {
        let c = tone(300.0, 16_000, 0.1);
        assert_eq!(resample(&c, 16_000).unwrap(), c);
    }

    #[test]
    fn length_scales_with_rate() {
        let c = tone(300.0, 32_000, 1.0);
        assert_eq!(resample(&c, 16_000).unwrap().samples.len(), 16_000);
        let c = tone(300.0, 8_000, 0.5);
        assert_eq!(resample(&c, 16_000).unwrap().samples.len(), 8_000);
    }

    #[test]
    fn tone_keeps_its_frequency() {
        let c = tone(440.0, 48_000, 0.25);
        let r = resample(&c, 16_000).unwrap();
        // 4000 samples at 16 kHz: 4 Hz bins
        let mid = &r.samples[1000..3000];
        let bin = 16_000.0 / mid.len() as f64;
        let peak = dft_peak_hz(mid, 16_000.0);
        assert!((peak - 440.0).abs() <= bin, "peak at {peak} Hz");
    }

    #[test]
    fn bessel_matches_known_value() {
        // I0(1) = 1.2660658777520082
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008_2).abs() < 1e-15);
    }
}
