//! Pre-trains briefly, then fine-tunes on three tone classes with the CLS head
//! and with mean pooling, and evaluates both on held-out clips.
//!
//! `cargo run --example finetune_tones -- [pretrain_steps] [finetune_steps]`

use eat_core::frontend::compute_corpus_stats;
use eat_core::pipeline::config::TrainConfig;
use eat_core::pipeline::data::{default_workers, load_inputs};
use eat_core::pipeline::evaluate::{predict_all, score};
use eat_core::pipeline::finetune::{Finetuner, LabeledSet};
use eat_core::pipeline::manifest::Manifest;
use eat_core::pipeline::pretrain::Pretrainer;
use eat_core::pipeline::synth::{write_pretrain_corpus, write_tone_classes, SMOKE_SAMPLES};
use eat_core::model::PredictionMode;

const CONFIGS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1).map(|s| s.parse::<u64>());
    let pre_steps = args.next().transpose()?.unwrap_or(100);
    let ft_steps = args.next().transpose()?.unwrap_or(500);
    let dir = std::env::temp_dir().join(format!("eat-finetune-{}", std::process::id()));

    let mut pcfg = TrainConfig::load(format!("{CONFIGS}/smoke_pretrain.conf").as_ref())?;
    pcfg.steps = pre_steps;
    pcfg.warmup_steps = pre_steps / 10;
    let corpus = Manifest::load(&write_pretrain_corpus(&dir.join("corpus"), 64, SMOKE_SAMPLES, 0)?)?;
    let pnorm = compute_corpus_stats(&corpus, &pcfg.frontend)?;
    let inputs = load_inputs(&corpus, &pcfg.frontend, pnorm, pcfg.target_frames, default_workers())?;
    let mut pre = Pretrainer::new(pcfg, pnorm, &inputs)?;
    while pre.step_count() < pre_steps {
        pre.step()?;
    }
    let init = pre.checkpoint();

    let split = write_tone_classes(&dir.join("tones"), &[500.0, 1500.0, 3000.0], 16, 8, SMOKE_SAMPLES, 1)?;
    let (train_m, test_m) = (Manifest::load(&split.train)?, Manifest::load(&split.test)?);
    let mut fcfg = TrainConfig::load(format!("{CONFIGS}/smoke_finetune.conf").as_ref())?;
    fcfg.steps = ft_steps;
    let norm = compute_corpus_stats(&train_m, &fcfg.frontend)?;
    let train = LabeledSet::load(&train_m, &fcfg, norm, None, default_workers())?;
    let test = LabeledSet::load(&test_m, &fcfg, norm, Some(&train.vocabulary), default_workers())?;

    for mode in [PredictionMode::Cls, PredictionMode::Mean] {
        let mut cfg = fcfg.clone();
        cfg.prediction_mode = mode;
        let mut tuner = Finetuner::new(cfg.clone(), norm, &init, train.clone())?;
        let started = std::time::Instant::now();
        while tuner.step_count() < ft_steps {
            let r = tuner.step()?;
            if r.step % 25 == 0 {
                println!("[{mode}] step {:4} loss {:.4} batch acc {:.2}", r.step, r.loss, r.batch_accuracy);
            }
        }
        for (name, set) in [("train", &train), ("held-out", &test)] {
            let logits = predict_all(tuner.params(), &cfg.model, &set.inputs, mode)?;
            let report = score(set.task, &set.vocabulary, mode, &logits, &set.targets)?;
            println!("[{mode}] {name} accuracy {:.3}", report.accuracy.unwrap_or(f64::NAN));
        }
        println!("[{mode}] {ft_steps} steps in {:.1} s", started.elapsed().as_secs_f64());
    }
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
