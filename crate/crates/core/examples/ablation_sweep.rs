//! Runs the block-shape and utterance-weight sweeps and prints their JSON.
//!
//! `cargo run --example ablation_sweep -- [steps] [--full]`
//!
//! `--full` sweeps every square block from 1x1 to 8x8.

use eat_core::frontend::compute_corpus_stats;
use eat_core::pipeline::ablation::{block_sweep, block_sweep_settings, block_sweep_settings_full, lambda_sweep};
use eat_core::pipeline::config::TrainConfig;
use eat_core::pipeline::data::{default_workers, load_inputs};
use eat_core::pipeline::finetune::LabeledSet;
use eat_core::pipeline::manifest::Manifest;
use eat_core::pipeline::synth::{write_pretrain_corpus, write_tone_classes, SMOKE_SAMPLES};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let full = args.iter().any(|a| a == "--full");
    let steps: u64 = args.iter().find(|a| !a.starts_with("--")).map(|s| s.parse()).transpose()?.unwrap_or(30);
    let dir = tempfile::tempdir()?;
    let corpus = Manifest::load(&write_pretrain_corpus(&dir.path().join("corpus"), 32, SMOKE_SAMPLES, 0)?)?;
    let tones = write_tone_classes(&dir.path().join("tones"), &[500.0, 1500.0, 3000.0], 8, 4, SMOKE_SAMPLES, 1)?;

    let mut base = TrainConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke_pretrain.conf").as_ref())?;
    base.steps = steps;
    base.warmup_steps = steps / 10;
    let norm = compute_corpus_stats(&corpus, &base.frontend)?;
    let inputs = load_inputs(&corpus, &base.frontend, norm, base.target_frames, default_workers())?;
    let train = LabeledSet::load(&Manifest::load(&tones.train)?, &base, norm, None, default_workers())?;
    let test = LabeledSet::load(&Manifest::load(&tones.test)?, &base, norm, Some(&train.vocabulary), default_workers())?;

    let settings = if full { block_sweep_settings_full() } else { block_sweep_settings() };
    let blocks = block_sweep(&base, &settings, norm, &inputs, &train, &test)?;
    println!("{}", serde_json::to_string_pretty(&blocks)?);
    let lambdas = lambda_sweep(&base, norm, &inputs, &train, &test)?;
    println!("{}", serde_json::to_string_pretty(&lambdas)?);
    Ok(())
}
