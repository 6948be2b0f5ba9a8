//! Command line front end. Exit codes: 0 success, 1 usage, 2 data, 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use eat_core::error::{EatError, Result};
use eat_core::frontend::{compute_corpus_stats, FrontendConfig};
use eat_core::masking::parse_block_list;
use eat_core::model::PredictionMode;
use eat_core::pipeline::checkpoint::Checkpoint;
use eat_core::pipeline::config::TrainConfig;
use eat_core::pipeline::data::default_workers;
use eat_core::pipeline::evaluate::evaluate;
use eat_core::pipeline::finetune::{finetune, FinetuneOptions};
use eat_core::pipeline::inspect::{inspect_mask, parse_grid, write_pgm};
use eat_core::pipeline::manifest::Manifest;
use eat_core::pipeline::pretrain::{pretrain, PretrainOptions};

#[derive(Parser)]
#[command(name = "eat", version, about = "Audio transformer pre-training, fine-tuning and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Self-supervised pre-training on an unlabeled manifest.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Zero wall-clock fields so logs compare byte for byte.
        #[arg(long)]
        deterministic: bool,
        /// Continue from a pre-training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Supervised fine-tuning from a pre-trained checkpoint.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Freeze the encoder and train only the head.
        #[arg(long)]
        head_only: bool,
        /// `cls` or `mean`.
        #[arg(long)]
        prediction_mode: Option<String>,
        #[arg(long)]
        deterministic: bool,
    },
    /// Scores a fine-tuned checkpoint on a labelled manifest.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Draws one mask plan as text and optionally as a PGM image.
    InspectMask {
        /// Grid as `TxF`, e.g. `64x8`.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        ratio: f64,
        /// One or more `HxW` block shapes, comma separated.
        #[arg(long)]
        block: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        pgm: Option<PathBuf>,
    },
    /// Corpus log-mel mean and standard deviation.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| EatError::Invalid(e.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain {
            config,
            manifest,
            out,
            seed,
            deterministic,
            resume,
        } => {
            let cfg = TrainConfig::load(&config)?;
            let opts = PretrainOptions {
                seed,
                deterministic,
                resume,
                workers: None,
            };
            let s = pretrain(cfg, &manifest, &out, &opts)?;
            println!(
                "{} steps; final l_ufo {}; teacher forwards {}; checkpoint {}",
                s.steps,
                s.last.map_or("n/a".into(), |r| format!("{:.6}", r.l_ufo)),
                s.teacher_forwards,
                s.final_checkpoint.display()
            );
        }
        Command::Finetune {
            config,
            init,
            manifest,
            out,
            head_only,
            prediction_mode,
            deterministic,
        } => {
            let cfg = TrainConfig::load(&config)?;
            let prediction = prediction_mode.map(|p| p.parse::<PredictionMode>()).transpose()?;
            let opts = FinetuneOptions {
                head_only,
                prediction,
                deterministic,
                workers: None,
            };
            let s = finetune(cfg, &init, &manifest, &out, &opts)?;
            println!(
                "final loss {}; checkpoint {}",
                s.last.map_or("n/a".into(), |r| format!("{:.6}", r.loss)),
                s.final_checkpoint.display()
            );
        }
        Command::Evaluate { ckpt, manifest, json } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let manifest = Manifest::load(&manifest)?;
            let report = to_json(&evaluate(&ckpt, &manifest, default_workers())?)?;
            println!("{report}");
            if let Some(path) = json {
                std::fs::write(&path, report + "\n").map_err(|e| EatError::io(&path, e))?;
            }
        }
        Command::InspectMask {
            grid,
            ratio,
            block,
            seed,
            pgm,
        } => {
            let r = inspect_mask(parse_grid(&grid)?, ratio, &parse_block_list(&block)?, seed)?;
            print!("{}", r.art);
            println!("{}", r.summary);
            if let Some(path) = pgm {
                write_pgm(&r.plan, &path, 8)?;
            }
        }
        Command::Stats { manifest } => {
            let m = Manifest::load(&manifest)?;
            let stats = compute_corpus_stats(&m, &FrontendConfig::default())?;
            println!(
                "{}",
                to_json(&serde_json::json!({ "clips": m.len(), "mean": stats.mean, "std": stats.std }))?
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
