//! End-to-end acceptance checks. Runs every criterion, prints one PASS/FAIL line
//! each, and exits non-zero if any failed.

use std::error::Error;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::Rng;

use eat_core::bootstrap::ema_update;
use eat_core::encoder::{EncoderConfig, Mode};
use eat_core::frontend::{mel_spectrogram, pad_to_length, AudioClip, FrontendConfig, MelFilterbank};
use eat_core::masking::{make_clone_set, plan_mask, BlockShape};
use eat_core::model::{init_student, pretrain_loss, ClipInput, ModelConfig, Teacher, TEACHER};
use eat_core::numerics::{finite_difference_check, ParamSet, Tape, Tensor};
use eat_core::objective::{build_targets, frame_loss, ufo, TARGET_EPS};
use eat_core::patching::Grid;
use eat_core::pipeline::ablation::{block_sweep, block_sweep_settings, lambda_sweep, AblationReport};
use eat_core::pipeline::checkpoint::Checkpoint;
use eat_core::pipeline::config::TrainConfig;
use eat_core::pipeline::data::{default_workers, load_inputs};
use eat_core::pipeline::evaluate::evaluate;
use eat_core::pipeline::finetune::{finetune, FinetuneOptions, LabeledSet, FINETUNE_RECORDS_FILE};
use eat_core::pipeline::manifest::Manifest;
use eat_core::pipeline::metrics::{accuracy, average_precision};
use eat_core::pipeline::pretrain::{pretrain, resolve_norm, PretrainOptions, Pretrainer, RECORDS_FILE};
use eat_core::pipeline::records::{read_records, FinetuneRecord, RecordWriter, TrainRecord};
use eat_core::pipeline::synth::{write_pretrain_corpus, write_tone_classes, ToneSplit, SMOKE_SAMPLES};
use eat_core::model::PredictionMode;
use eat_core::rng::{stream, Purpose};

type Outcome = Result<String, Box<dyn Error>>;

const CONFIGS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");
const TONES: [f64; 3] = [500.0, 1500.0, 3000.0];

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+).into());
        }
    };
}

fn smoke_config(name: &str) -> Result<TrainConfig, Box<dyn Error>> {
    Ok(TrainConfig::load(Path::new(&format!("{CONFIGS}/{name}")))?)
}

fn tiny_model(layers: usize, embed_dim: usize, patch_size: usize) -> ModelConfig {
    ModelConfig {
        patch_size,
        encoder: EncoderConfig {
            layers,
            embed_dim,
            heads: 2,
            mlp_ratio: 2.0,
            droppath_rate: 0.0,
            dropout: 0.0,
        },
        decoder_layers: 2,
        decoder_kernel: 3,
    }
}

fn wavy(t: usize, f: usize, phase: f64) -> Tensor {
    Tensor::from_fn(vec![t, f], |i| (i as f64 * 0.37 + phase).sin())
}

fn random_tensor(shape: Vec<usize>, seed: u64, scale: f64) -> Tensor {
    let mut rng = stream(seed, Purpose::Synth, &[99]);
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Student weights pushed away from init so every path carries signal.
fn perturbed_student(cfg: &ModelConfig, seed: u64) -> Result<ParamSet, Box<dyn Error>> {
    let mut student = init_student(cfg, seed)?;
    for (k, (_, t)) in student.iter_mut().enumerate() {
        let noise = random_tensor(t.shape().to_vec(), seed * 1000 + k as u64, 0.2);
        *t = t.add(&noise)?;
    }
    Ok(student)
}

fn c1_gradient_fidelity() -> Outcome {
    let started = Instant::now();
    let cfg = tiny_model(2, 16, 4);
    let student = perturbed_student(&cfg, 1)?;
    let teacher = Teacher::from_student(&student);
    let values = wavy(16, 16, 0.3);
    let target = teacher.targets(&cfg, &values)?;
    let clip = ClipInput::new(&values, cfg.patch_size)?;
    ensure!(clip.grid == Grid::new(4, 4)?, "grid is {}", clip.grid);
    let plans = make_clone_set(clip.grid, 0.5, &[BlockShape::new(2, 2)], 1, 3)?.clones;
    let report = finite_difference_check(
        |tape, b| Ok::<_, eat_core::error::EatError>(pretrain_loss(tape, b, &cfg, &clip, &target, &plans, 1.0, Mode::Eval)?.total),
        &student,
        1e-5,
    )?;
    let secs = started.elapsed().as_secs_f64();
    let detail = format!(
        "max rel err {:.2e} over {} coordinates in {secs:.1} s",
        report.max_rel_error, report.coordinates
    );
    ensure!(report.max_rel_error < 1e-4, "{detail}; worst {:?}", report.worst);
    ensure!(secs < 60.0, "{detail}");
    Ok(detail)
}

fn c2_mask_exactness() -> Outcome {
    let mut rng = stream(2, Purpose::Synth, &[0]);
    for i in 0..1000 {
        let grid = Grid::new(rng.random_range(1..=64), rng.random_range(1..=16))?;
        let ratio = rng.random_range(0.01..0.99);
        let n_shapes = rng.random_range(1..=3);
        let shapes: Vec<BlockShape> = (0..n_shapes)
            .map(|_| BlockShape::new(rng.random_range(1..=grid.time.min(8)), rng.random_range(1..=grid.freq.min(8))))
            .collect();
        let seed = rng.random::<u64>();
        let plan = plan_mask(grid, ratio, &shapes, seed)?;
        let expected = ((1.0 - ratio) * grid.cells() as f64).round() as usize;
        let kept = plan.keep.iter().filter(|&&k| k).count();
        ensure!(
            kept == expected && plan.keep.len() == grid.cells(),
            "tuple {i}: grid {grid} ratio {ratio} kept {kept}, expected {expected}"
        );
    }
    let grid = Grid::new(64, 8)?;
    let plans = 10_000;
    let mut counts = vec![0usize; grid.cells()];
    for seed in 0..plans {
        let plan = plan_mask(grid, 0.8, &[BlockShape::new(1, 1)], seed)?;
        for (c, &k) in counts.iter_mut().zip(&plan.keep) {
            *c += k as usize;
        }
    }
    let worst = counts
        .iter()
        .map(|&c| (c as f64 / plans as f64 - 0.2).abs())
        .fold(0.0, f64::max);
    ensure!(worst <= 0.02, "1x1 per-cell keep frequency deviates by {worst:.4}");
    Ok(format!("1000 tuples exact; 1x1 keep frequency max deviation {worst:.4}"))
}

fn c3_ema_closed_form() -> Outcome {
    let tau = 0.9;
    let mut worst = 0.0f64;
    for k in [1u32, 10, 100] {
        let student: ParamSet = [("w".to_string(), random_tensor(vec![4, 5], 1, 1.0))].into_iter().collect();
        let t0 = random_tensor(vec![4, 5], 2, 1.0);
        let mut teacher: ParamSet = [(format!("{TEACHER}w"), t0.clone())].into_iter().collect();
        for _ in 0..k {
            ema_update(&mut teacher, &student, TEACHER, tau)?;
        }
        let s = student.get("w").unwrap();
        let got = teacher.get(&format!("{TEACHER}w")).unwrap();
        for ((g, sv), tv) in got.data().iter().zip(s.data()).zip(t0.data()) {
            let want = sv + tau.powi(k as i32) * (tv - sv);
            worst = worst.max((g - want).abs());
        }
        ensure!(worst <= 1e-12, "k={k}: deviation {worst:.2e}");
    }
    Ok(format!("k in {{1, 10, 100}} max deviation {worst:.2e}"))
}

fn tiny_train_config(clone_batch: usize) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model = tiny_model(2, 16, 4);
    cfg.target_frames = 16;
    cfg.frontend.mel_bins = 16;
    cfg.steps = 3;
    cfg.warmup_steps = 1;
    cfg.batch_size = 2;
    cfg.clone_batch = clone_batch;
    cfg.mask_blocks = vec![BlockShape::new(2, 2)];
    cfg.checkpoint_every = 0;
    cfg.seed = 4;
    cfg
}

fn c4_stop_gradient() -> Outcome {
    let cfg = tiny_model(2, 16, 4);
    let student = perturbed_student(&cfg, 5)?;
    let teacher = Teacher::from_student(&student);
    let values = wavy(16, 16, 0.1);
    let target = teacher.targets(&cfg, &values)?;
    let clip = ClipInput::new(&values, 4)?;
    let plans = make_clone_set(clip.grid, 0.5, &[BlockShape::new(2, 2)], 4, 1)?.clones;
    let mut tape = Tape::new();
    let b = student.bind(&mut tape, |_| true)?;
    let loss = pretrain_loss(&mut tape, &b, &cfg, &clip, &target, &plans, 1.0, Mode::Eval)?;
    let grads = tape.backward(loss.total)?;
    ensure!(
        grads.params().keys().all(|n| student.get(n).is_some() && !n.starts_with(TEACHER)),
        "gradient map names a non-student parameter"
    );

    let inputs: Vec<Tensor> = (0..4).map(|i| wavy(16, 16, i as f64)).collect();
    let mut counts = Vec::new();
    for clone_batch in [1, 16] {
        let cfg = tiny_train_config(clone_batch);
        let (steps, batch) = (cfg.steps, cfg.batch_size as u64);
        let mut trainer = Pretrainer::new(cfg, eat_core::frontend::NormStats::AUDIOSET, &inputs)?;
        while trainer.step_count() < steps {
            trainer.step()?;
        }
        let n = trainer.teacher().forward_count();
        ensure!(n == steps * batch, "clone_batch {clone_batch}: {n} teacher forwards for {steps}x{batch} clips");
        counts.push(n);
    }
    Ok(format!("{} gradient entries, none teacher; forwards {counts:?} for clone_batch 1 and 16", grads.params().len()))
}

fn c5_ufo_decomposition() -> Outcome {
    let cfg = tiny_model(2, 16, 4);
    let student = perturbed_student(&cfg, 6)?;
    let values = wavy(16, 16, 0.7);
    let target = Teacher::from_student(&student).targets(&cfg, &values)?;
    let clip = ClipInput::new(&values, 4)?;
    let plans = make_clone_set(clip.grid, 0.6, &[BlockShape::new(2, 2)], 3, 2)?.clones;
    let mut worst = 0.0f64;
    for lambda in [0.0, 0.01, 1.0, 10.0] {
        let mut tape = Tape::new();
        let b = student.bind_frozen(&mut tape);
        let loss = pretrain_loss(&mut tape, &b, &cfg, &clip, &target, &plans, lambda, Mode::Eval)?;
        for c in &loss.per_clone {
            let v = c.values(&tape);
            worst = worst.max((v.l_ufo - (v.l_f + lambda * v.l_u)).abs());
        }
    }
    ensure!(worst <= 1e-12, "decomposition deviates by {worst:.2e}");

    let c = random_tensor(vec![1, 8], 7, 1.0);
    let x = random_tensor(vec![5, 8], 8, 1.0);
    let (y_bar, y_o) = (random_tensor(vec![1, 8], 9, 1.0), random_tensor(vec![5, 8], 10, 1.0));
    let mut t1 = Tape::new();
    let (c1, x1) = (t1.input(c, true), t1.input(x.clone(), true));
    let full = ufo(&mut t1, c1, &y_bar, x1, &y_o, 0.0)?;
    let g1 = t1.backward(full.total)?;
    let mut t2 = Tape::new();
    let x2 = t2.input(x, true);
    let only = frame_loss(&mut t2, x2, &y_o)?;
    let g2 = t2.backward(only)?;
    let (a, b) = (t1.value(full.total).item(), t2.value(only).item());
    ensure!(a.to_bits() == b.to_bits(), "λ=0 total {a} vs frame loss {b}");
    ensure!(
        g1.wrt(x1).ok_or("no frame gradient")?.data().iter().zip(g2.wrt(x2).ok_or("no frame gradient")?.data()).all(|(p, q)| p.to_bits() == q.to_bits()),
        "λ=0 frame gradient differs from the frame-only gradient"
    );
    Ok(format!("λ in {{0, 0.01, 1, 10}} max deviation {worst:.2e}; λ=0 bit-identical"))
}

/// Per-row standardization then layer mean, written out longhand.
fn oracle_targets(layers: &[Tensor]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let (p, e) = (layers[0].shape()[0], layers[0].shape()[1]);
    let mut y = vec![vec![0.0; e]; p];
    for l in layers {
        for (r, row) in y.iter_mut().enumerate() {
            let x = &l.data()[r * e..(r + 1) * e];
            let mean = x.iter().sum::<f64>() / e as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / e as f64;
            for (o, v) in row.iter_mut().zip(x) {
                *o += (v - mean) / (var + TARGET_EPS).sqrt() / layers.len() as f64;
            }
        }
    }
    let bar = (0..e).map(|j| y.iter().map(|r| r[j]).sum::<f64>() / p as f64).collect();
    (y, bar)
}

fn c6_target_construction() -> Outcome {
    let mut rng = stream(6, Purpose::Synth, &[0]);
    let mut worst = 0.0f64;
    for case in 0..50u64 {
        let (p, e) = (rng.random_range(1..=12), rng.random_range(2..=24));
        let layers: Vec<Tensor> = (0..3).map(|l| random_tensor(vec![p, e], case * 10 + l, 3.0)).collect();
        let got = build_targets(&layers)?;
        let (y, bar) = oracle_targets(&layers);
        for r in 0..p {
            for (g, w) in got.y_a.row(r).iter().zip(&y[r]) {
                worst = worst.max((g - w).abs());
            }
        }
        for (g, w) in got.y_bar.data().iter().zip(&bar) {
            worst = worst.max((g - w).abs());
        }
    }
    ensure!(worst <= 1e-12, "targets deviate by {worst:.2e}");
    Ok(format!("50 random 3-layer cases max deviation {worst:.2e}"))
}

fn c7_metric_oracles() -> Outcome {
    let hand = average_precision(&[0.9, 0.8, 0.7], &[true, false, true])?.ok_or("hand case has positives")?;
    ensure!((hand - 0.833_333_333_3).abs() < 1e-9, "hand case AP {hand}");
    let mut rng = stream(7, Purpose::Synth, &[0]);
    for case in 0..100 {
        let n = rng.random_range(2..40);
        let mut targets: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        targets[0] = true;
        let scores: Vec<f64> = targets.iter().map(|&t| if t { 1.0 } else { 0.0 } + rng.random_range(0.0..0.5)).collect();
        let ap = average_precision(&scores, &targets)?.unwrap();
        ensure!(ap == 1.0, "case {case}: perfect ranking AP {ap}");

        let k = rng.random_range(2..6);
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let mut hits = 0;
        for i in 0..n {
            if pred[i] == truth[i] {
                hits += 1;
            }
        }
        let acc = accuracy(&pred, &truth)?;
        ensure!(acc == hits as f64 / n as f64, "case {case}: accuracy {acc} vs {hits}/{n}");
    }
    Ok(format!("hand case AP {hand:.9}; 100 perfect rankings and accuracy counts agree"))
}

fn c8_frontend() -> Outcome {
    let cfg = FrontendConfig::default();
    let sr = cfg.sample_rate as f64;
    let tone: Vec<f64> = (0..160_000).map(|n| 0.5 * (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / sr).sin()).collect();
    let spec = mel_spectrogram(&AudioClip::new(tone, cfg.sample_rate)?, &cfg)?;
    ensure!(spec.frames() == 998, "{} frames before padding", spec.frames());
    let padded = pad_to_length(&spec, 1024, &cfg)?;
    ensure!(padded.frames() == 1024, "{} frames after padding", padded.frames());
    let clip = ClipInput::new(padded.values(), 16)?;
    ensure!(clip.grid == Grid::new(64, 8)? && clip.grid.cells() == 512, "grid {}", clip.grid);

    let bins = spec.bins();
    let mut mean = vec![0.0; bins];
    for r in 0..spec.frames() {
        for (m, v) in mean.iter_mut().zip(spec.values().row(r)) {
            *m += v / spec.frames() as f64;
        }
    }
    let peak = (0..bins).max_by(|&a, &b| mean[a].total_cmp(&mean[b])).unwrap();
    let fb = MelFilterbank::new(&cfg);
    let nearest = (0..bins)
        .min_by(|&a, &b| (fb.centers_hz()[a] - 1000.0).abs().total_cmp(&(fb.centers_hz()[b] - 1000.0).abs()))
        .unwrap();
    ensure!(peak == nearest, "1 kHz peaks at bin {peak}, nearest bin is {nearest}");
    Ok(format!("T=998 -> 1024, grid 64x8, P=512; 1 kHz peak at bin {peak}"))
}

struct Shared {
    dir: tempfile::TempDir,
    corpus: std::path::PathBuf,
    tones: ToneSplit,
}

impl Shared {
    fn new() -> Result<Self, Box<dyn Error>> {
        let dir = tempfile::tempdir()?;
        let corpus = write_pretrain_corpus(&dir.path().join("corpus"), 64, SMOKE_SAMPLES, 0)?;
        let tones = write_tone_classes(&dir.path().join("tones"), &TONES, 16, 8, SMOKE_SAMPLES, 1)?;
        Ok(Self { dir, corpus, tones })
    }

    fn pretrained(&self) -> std::path::PathBuf {
        self.dir.path().join("run_a").join("final.eat")
    }
}

fn c9_pretrain_smoke(shared: &Shared) -> Outcome {
    let cfg = smoke_config("smoke_pretrain.conf")?;
    ensure!(cfg.model.encoder.layers == 4 && cfg.model.embed_dim() == 64 && cfg.steps == 300, "smoke config drifted");
    let opts = PretrainOptions {
        seed: Some(0),
        deterministic: true,
        ..Default::default()
    };
    let mut logs = Vec::new();
    let mut secs = Vec::new();
    for run in ["run_a", "run_b"] {
        let started = Instant::now();
        let out = shared.dir.path().join(run);
        pretrain(cfg.clone(), &shared.corpus, &out, &opts)?;
        secs.push(started.elapsed().as_secs_f64());
        logs.push(std::fs::read(out.join(RECORDS_FILE))?);
    }
    let records: Vec<TrainRecord> = read_records(&shared.dir.path().join("run_a").join(RECORDS_FILE))?;
    ensure!(records.len() == 300, "{} records", records.len());
    let (l10, last) = (records[9].l_ufo, records[299].l_ufo);
    let decomposed = records
        .iter()
        .all(|r| (r.l_ufo - (r.l_f + cfg.utterance_weight * r.l_u)).abs() <= 1e-12);
    let detail = format!(
        "L_UFO step 10 {l10:.4} -> step 300 {last:.4} (ratio {:.3}); runs {:.0} s and {:.0} s",
        last / l10,
        secs[0],
        secs[1]
    );
    ensure!(last <= 0.5 * l10, "{detail}");
    ensure!(logs[0] == logs[1], "deterministic rerun log differs; {detail}");
    ensure!(decomposed, "logged L_UFO is not L_f + λ·L_u");
    ensure!(secs.iter().all(|&s| s < 600.0), "{detail}");
    Ok(format!("{detail}; rerun byte-identical"))
}

fn c10_finetune_smoke(shared: &Shared) -> Outcome {
    let init = shared.pretrained();
    ensure!(init.exists(), "needs the pre-training smoke checkpoint");
    let cfg = smoke_config("smoke_finetune.conf")?;
    ensure!(cfg.steps <= 500, "fine-tuning runs {} steps", cfg.steps);
    let train_m = Manifest::load(&shared.tones.train)?;
    let test_m = Manifest::load(&shared.tones.test)?;
    let mut lines = Vec::new();
    let mut cls_acc = (0.0, 0.0);
    for mode in [PredictionMode::Cls, PredictionMode::Mean] {
        let out = shared.dir.path().join(format!("ft_{mode}"));
        let opts = FinetuneOptions {
            prediction: Some(mode),
            deterministic: true,
            ..Default::default()
        };
        let summary = finetune(cfg.clone(), &init, &shared.tones.train, &out, &opts)?;
        let log: Vec<FinetuneRecord> = read_records(&out.join(FINETUNE_RECORDS_FILE))?;
        ensure!(
            log.len() as u64 == cfg.steps && log.iter().all(|r| r.prediction_mode == mode.to_string()),
            "{mode} log is incomplete or mislabelled"
        );
        let ckpt = Checkpoint::load(&summary.final_checkpoint)?;
        let train = evaluate(&ckpt, &train_m, default_workers())?.accuracy.unwrap_or(0.0);
        let test = evaluate(&ckpt, &test_m, default_workers())?.accuracy.unwrap_or(0.0);
        if mode == PredictionMode::Cls {
            cls_acc = (train, test);
        }
        lines.push(format!("{mode} train {train:.3} held-out {test:.3}"));
    }
    let detail = format!("{} steps; {}", cfg.steps, lines.join("; "));
    ensure!(cls_acc.0 >= 0.9 && cls_acc.1 >= 0.8, "{detail}");
    Ok(detail)
}

fn c11_checkpoint_round_trip(shared: &Shared) -> Outcome {
    let mut cfg = smoke_config("smoke_pretrain.conf")?;
    cfg.steps = 8;
    cfg.warmup_steps = 2;
    cfg.checkpoint_every = 0;
    let opts = PretrainOptions {
        deterministic: true,
        ..Default::default()
    };
    let whole = shared.dir.path().join("rt_whole");
    pretrain(cfg.clone(), &shared.corpus, &whole, &opts)?;

    let split = shared.dir.path().join("rt_split");
    std::fs::create_dir_all(&split)?;
    let manifest = Manifest::load(&shared.corpus)?;
    let norm = resolve_norm(&cfg, &manifest)?;
    let inputs = load_inputs(&manifest, &cfg.frontend, norm, cfg.target_frames, default_workers())?;
    let mut first = Pretrainer::new(cfg.clone(), norm, &inputs)?;
    first.set_deterministic(true);
    let mut log = RecordWriter::create(&split.join(RECORDS_FILE))?;
    while first.step_count() < 4 {
        log.write(&first.step()?)?;
    }
    drop(log);
    let mid = split.join("mid.eat");
    first.save_checkpoint(&mid)?;
    drop(first);
    let resumed = PretrainOptions {
        resume: Some(mid),
        ..opts
    };
    pretrain(cfg, &shared.corpus, &split, &resumed)?;

    let a = std::fs::read(whole.join(RECORDS_FILE))?;
    let b = std::fs::read(split.join(RECORDS_FILE))?;
    ensure!(a == b, "resumed record stream differs from the uninterrupted one");
    let (ca, cb) = (
        Checkpoint::load(&whole.join("final.eat"))?,
        Checkpoint::load(&split.join("final.eat"))?,
    );
    ensure!(ca.to_bytes()? == cb.to_bytes()?, "final checkpoints differ");
    Ok("4 + 4 steps across save/load match 8 uninterrupted steps; final checkpoints identical".into())
}

fn c12_ablation_harness(shared: &Shared) -> Outcome {
    let mut base = smoke_config("smoke_pretrain.conf")?;
    base.steps = 12;
    base.warmup_steps = 2;
    base.checkpoint_every = 0;
    let corpus = Manifest::load(&shared.corpus)?;
    let norm = resolve_norm(&base, &corpus)?;
    let inputs = load_inputs(&corpus, &base.frontend, norm, base.target_frames, default_workers())?;
    let probe = |m: &Path, vocab: Option<&[String]>| -> Result<LabeledSet, Box<dyn Error>> {
        Ok(LabeledSet::load(&Manifest::load(m)?, &base, norm, vocab, default_workers())?)
    };
    let train = probe(&shared.tones.train, None)?;
    let test = probe(&shared.tones.test, Some(&train.vocabulary))?;
    let reports = [
        block_sweep(&base, &block_sweep_settings(), norm, &inputs[..16], &train, &test)?,
        lambda_sweep(&base, norm, &inputs[..16], &train, &test)?,
    ];
    let mut summary = Vec::new();
    for r in &reports {
        let json = serde_json::to_string_pretty(r)?;
        let path = shared.dir.path().join(format!("sweep_{}.json", r.sweep));
        std::fs::write(&path, &json)?;
        let back: AblationReport = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        ensure!(back == *r, "{} JSON does not round trip", r.sweep);
        let value: serde_json::Value = serde_json::from_str(&json)?;
        let keys: Vec<Vec<String>> = value["points"]
            .as_array()
            .ok_or("points is not an array")?
            .iter()
            .map(|p| p.as_object().map(|o| o.keys().cloned().collect()).unwrap_or_default())
            .collect();
        ensure!(keys.windows(2).all(|w| w[0] == w[1]), "{} points do not share one schema", r.sweep);
        for p in &r.points {
            ensure!(
                p.final_l_ufo.is_finite() && (0.0..=1.0).contains(&p.probe_accuracy) && p.steps == base.steps,
                "{}: bad point {p:?}",
                r.sweep
            );
            ensure!(
                (p.final_l_ufo - (p.final_l_f + p.lambda * p.final_l_u)).abs() <= 1e-12,
                "{}: decomposition broken at {}",
                r.sweep,
                p.label
            );
        }
        let labels: Vec<&str> = r.points.iter().map(|p| p.label.as_str()).collect();
        summary.push(format!("{} [{}]", r.sweep, labels.join(", ")));
    }
    let expect_blocks = ["1x1", "2x2", "5x5", "mixed"];
    ensure!(
        reports[0].points.iter().map(|p| p.label.as_str()).eq(expect_blocks),
        "block sweep labels"
    );
    ensure!(
        reports[1].points.iter().map(|p| p.lambda).eq([0.0, 0.01, 1.0, 10.0]),
        "λ sweep values"
    );
    Ok(summary.join("; "))
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let started = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f));
    let secs = started.elapsed().as_secs_f64();
    let (ok, detail) = match outcome {
        Ok(Ok(d)) => (true, d),
        Ok(Err(e)) => (false, e.to_string()),
        Err(p) => (
            false,
            p.downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()),
        ),
    };
    println!("{} {id:>2} {name}: {detail} [{secs:.1} s]", if ok { "PASS" } else { "FAIL" });
    ok
}

fn main() {
    // `cargo test -- --list` and filters come through here too; only a bare run executes.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with("--")).collect();
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    let shared = match Shared::new() {
        Ok(s) => s,
        Err(e) => {
            println!("FAIL  acceptance setup: {e}");
            std::process::exit(1);
        }
    };
    let results = [
        run(1, "gradient fidelity", c1_gradient_fidelity),
        run(2, "mask exactness", c2_mask_exactness),
        run(3, "EMA closed form", c3_ema_closed_form),
        run(4, "stop-gradient", c4_stop_gradient),
        run(5, "UFO decomposition", c5_ufo_decomposition),
        run(6, "target construction", c6_target_construction),
        run(7, "metric oracles", c7_metric_oracles),
        run(8, "frontend", c8_frontend),
        run(9, "pre-training smoke", || c9_pretrain_smoke(&shared)),
        run(10, "fine-tuning smoke", || c10_finetune_smoke(&shared)),
        run(11, "checkpoint round trip", || c11_checkpoint_round_trip(&shared)),
        run(12, "ablation harness", || c12_ablation_harness(&shared)),
    ];
    let passed = results.iter().filter(|&&r| r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
