//! Pre-trains the tiny model on a synthetic corpus and prints the loss curve.
//!
//! `cargo run --example pretrain_synthetic -- [steps]`

use eat_core::frontend::compute_corpus_stats;
use eat_core::pipeline::config::TrainConfig;
use eat_core::pipeline::data::{default_workers, load_inputs};
use eat_core::pipeline::manifest::Manifest;
use eat_core::pipeline::pretrain::Pretrainer;
use eat_core::pipeline::synth::{write_pretrain_corpus, SMOKE_SAMPLES};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(60);
    let dir = tempfile_dir()?;
    let manifest_path = write_pretrain_corpus(&dir, 64, SMOKE_SAMPLES, 0)?;
    let manifest = Manifest::load(&manifest_path)?;

    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke_pretrain.conf"))?;
    let mut cfg = TrainConfig::parse(&text)?;
    cfg.steps = steps;
    cfg.warmup_steps = cfg.warmup_steps.min(steps / 10);
    let norm = compute_corpus_stats(&manifest, &cfg.frontend)?;
    println!("corpus mean {:.3} std {:.3}", norm.mean, norm.std);
    let inputs = load_inputs(&manifest, &cfg.frontend, norm, cfg.target_frames, default_workers())?;

    let mut trainer = Pretrainer::new(cfg, norm, &inputs)?;
    let started = std::time::Instant::now();
    while trainer.step_count() < steps {
        let r = trainer.step()?;
        if r.step == 1 || r.step % 10 == 0 {
            println!(
                "step {:4}  l_ufo {:.4}  l_f {:.4}  l_u {:.4}  lr {:.2e}  |g| {:.3}",
                r.step, r.l_ufo, r.l_f, r.l_u, r.lr, r.grad_norm
            );
        }
    }
    println!(
        "{steps} steps in {:.1} s, teacher forwards {}",
        started.elapsed().as_secs_f64(),
        trainer.teacher().forward_count()
    );
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}

fn tempfile_dir() -> std::io::Result<std::path::PathBuf> {
    let dir = std::env::temp_dir().join(format!("eat-pretrain-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}
