//! Saves a pre-training run mid-way, reloads it and shows the continuation
//! matches an uninterrupted run record for record.
//!
//! `cargo run --example checkpoint_resume -- [steps]`

use eat_core::frontend::compute_corpus_stats;
use eat_core::pipeline::checkpoint::Checkpoint;
use eat_core::pipeline::config::TrainConfig;
use eat_core::pipeline::data::{default_workers, load_inputs};
use eat_core::pipeline::manifest::Manifest;
use eat_core::pipeline::pretrain::Pretrainer;
use eat_core::pipeline::synth::{write_pretrain_corpus, SMOKE_SAMPLES};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(6);
    let dir = tempfile::tempdir()?;
    let manifest = Manifest::load(&write_pretrain_corpus(dir.path(), 8, SMOKE_SAMPLES, 0)?)?;
    let mut cfg = TrainConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke_pretrain.conf").as_ref())?;
    cfg.steps = steps;
    cfg.warmup_steps = 1;
    let norm = compute_corpus_stats(&manifest, &cfg.frontend)?;
    let inputs = load_inputs(&manifest, &cfg.frontend, norm, cfg.target_frames, default_workers())?;

    let mut whole = Pretrainer::new(cfg.clone(), norm, &inputs)?;
    whole.set_deterministic(true);
    let mut reference = Vec::new();
    while whole.step_count() < steps {
        reference.push(whole.step()?);
    }

    let mut first = Pretrainer::new(cfg, norm, &inputs)?;
    first.set_deterministic(true);
    let half = steps / 2;
    let mut resumed = Vec::new();
    while first.step_count() < half {
        resumed.push(first.step()?);
    }
    let path = dir.path().join("mid.eat");
    first.save_checkpoint(&path)?;
    let size = std::fs::metadata(&path)?.len();
    let mut second = Pretrainer::from_checkpoint(Checkpoint::load(&path)?, &inputs)?;
    second.set_deterministic(true);
    while second.step_count() < steps {
        resumed.push(second.step()?);
    }
    for (a, b) in reference.iter().zip(&resumed) {
        println!("step {}: l_ufo {:.10} vs {:.10} {}", a.step, a.l_ufo, b.l_ufo, if a == b { "same" } else { "DIFFERENT" });
    }
    println!("checkpoint at step {half}: {size} bytes; streams identical: {}", reference == resumed);
    Ok(())
}
