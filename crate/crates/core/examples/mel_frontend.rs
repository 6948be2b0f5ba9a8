//! Turns a synthetic two-tone clip into a log-mel spectrogram and patch grid.
//!
//! `cargo run --example mel_frontend -- [seconds]`

use eat_core::frontend::{mel_spectrogram, normalize, pad_to_length, AudioClip, FrontendConfig, MelExtractor};
use eat_core::model::ClipInput;

const TARGET_FRAMES: usize = 1024;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let secs: f64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(10.0);
    let cfg = FrontendConfig::default();
    let sr = cfg.sample_rate as f64;
    let n = (secs * sr) as usize;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let second = if t > secs / 2.0 { 0.3 * (2.0 * std::f64::consts::PI * 3000.0 * t).sin() } else { 0.0 };
            0.5 * (2.0 * std::f64::consts::PI * 1000.0 * t).sin() + second
        })
        .collect();
    let clip = AudioClip::new(samples, cfg.sample_rate)?;
    let spec = mel_spectrogram(&clip, &cfg)?;
    println!("{n} samples -> {} frames x {} mel bins", spec.frames(), spec.bins());

    let centers = MelExtractor::new(&cfg)?.filterbank().centers_hz().to_vec();
    for (label, range) in [("first half", 0..spec.frames() / 2), ("second half", spec.frames() / 2..spec.frames())] {
        let mut mean = vec![0.0; spec.bins()];
        for r in range.clone() {
            for (m, v) in mean.iter_mut().zip(spec.values().row(r)) {
                *m += v / range.len() as f64;
            }
        }
        let mut order: Vec<usize> = (0..mean.len()).collect();
        order.sort_by(|&a, &b| mean[b].total_cmp(&mean[a]));
        let top: Vec<String> = order[..3].iter().map(|&b| format!("bin {b} ({:.0} Hz)", centers[b])).collect();
        println!("{label}: strongest {}", top.join(", "));
    }

    if spec.frames() > TARGET_FRAMES {
        return Err(format!("{} frames exceed the {TARGET_FRAMES}-frame input; use at most 10.24 s", spec.frames()).into());
    }
    let target = TARGET_FRAMES;
    let padded = normalize(&pad_to_length(&spec, target, &cfg)?, -4.268, 4.569)?;
    let input = ClipInput::new(padded.values(), 16)?;
    println!("padded to {target} frames; patch grid {} ({} patches)", input.grid, input.grid.cells());
    Ok(())
}
