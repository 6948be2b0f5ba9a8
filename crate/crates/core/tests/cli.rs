//! Drives the `eat` binary: exit codes, determinism and the full
//! pretrain, finetune, evaluate round on a tiny model.

use std::path::Path;
use std::process::{Command, Output};

use eat_core::pipeline::synth::{write_pretrain_corpus, write_tone_classes, SMOKE_SAMPLES};

fn eat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eat"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = "\
target_frames = 32
mel_bins = 32
patch_size = 8
embed_dim = 16
heads = 2
layers = 1
mlp_ratio = 2
decoder_layers = 1
decoder_kernel = 3
batch_size = 2
clone_batch = 2
steps = 4
warmup_steps = 1
mask_ratio = 0.5
mask_blocks = 2x2
norm_mean = compute
norm_std = compute
checkpoint_every = 0
";

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&eat(&[])), 1);
    assert_eq!(code(&eat(&["frobnicate"])), 1);
    assert_eq!(code(&eat(&["--help"])), 0);
    let bad_ratio = eat(&["inspect-mask", "--grid", "64x8", "--ratio", "1.5", "--block", "5x5", "--seed", "1"]);
    assert_eq!(code(&bad_ratio), 1);
    let bad_grid = eat(&["inspect-mask", "--grid", "64by8", "--ratio", "0.8", "--block", "5x5", "--seed", "1"]);
    assert_eq!(code(&bad_grid), 1);
}

#[test]
fn inspect_mask_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.pgm"), dir.path().join("b.pgm"));
    let args = |p: &Path| {
        eat(&["inspect-mask", "--grid", "64x8", "--ratio", "0.8", "--block", "5x5", "--seed", "7", "--pgm", s(p)])
    };
    let (oa, ob) = (args(&a), args(&b));
    assert_eq!(code(&oa), 0);
    let text = String::from_utf8(oa.stdout.clone()).unwrap();
    assert_eq!(text.lines().last(), Some("kept 102 / 512"));
    assert_eq!(text.lines().count(), 9);
    assert_eq!(oa.stdout, ob.stdout);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn missing_data_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&eat(&["stats", "--manifest", s(&dir.path().join("none.csv"))])), 2);
    let manifest = dir.path().join("m.csv");
    std::fs::write(&manifest, "path,labels\nabsent.wav,\n").unwrap();
    assert_eq!(code(&eat(&["stats", "--manifest", s(&manifest)])), 2);
}

#[test]
fn unknown_config_key_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_pretrain_corpus(&dir.path().join("c"), 2, SMOKE_SAMPLES, 0).unwrap();
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "learning_rate = 0.1\n").unwrap();
    let o = eat(&["pretrain", "--config", s(&conf), "--manifest", s(&manifest), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn divergence_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_pretrain_corpus(&dir.path().join("c"), 4, SMOKE_SAMPLES, 0).unwrap();
    let conf = dir.path().join("hot.conf");
    std::fs::write(&conf, format!("{}peak_lr = 1e300\ngrad_clip = 0\n", TINY.replace("steps = 4", "steps = 20"))).unwrap();
    let o = eat(&["pretrain", "--config", s(&conf), "--manifest", s(&manifest), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn pretrain_finetune_evaluate_round() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = write_pretrain_corpus(&d.join("c"), 4, SMOKE_SAMPLES, 0).unwrap();
    let tones = write_tone_classes(&d.join("t"), &[500.0, 3000.0], 2, 1, SMOKE_SAMPLES, 1).unwrap();
    let conf = d.join("tiny.conf");
    std::fs::write(&conf, TINY).unwrap();

    let stats = eat(&["stats", "--manifest", s(&corpus)]);
    assert_eq!(code(&stats), 0);
    let v: serde_json::Value = serde_json::from_slice(&stats.stdout).unwrap();
    assert_eq!(v["clips"], 4);
    assert!(v["std"].as_f64().unwrap() > 0.0);

    let pre = |out: &str| {
        eat(&["pretrain", "--config", s(&conf), "--manifest", s(&corpus), "--out", s(&d.join(out)), "--seed", "3", "--deterministic"])
    };
    assert_eq!(code(&pre("p1")), 0);
    assert_eq!(code(&pre("p2")), 0);
    let log = |out: &str| std::fs::read(d.join(out).join("train_log.jsonl")).unwrap();
    assert_eq!(log("p1"), log("p2"));
    assert_eq!(String::from_utf8(log("p1")).unwrap().lines().count(), 4);

    let init = d.join("p1").join("final.eat");
    let ft = eat(&[
        "finetune", "--config", s(&conf), "--init", s(&init), "--manifest", s(&tones.train), "--out",
        s(&d.join("f")), "--head-only", "--prediction-mode", "mean",
    ]);
    assert_eq!(code(&ft), 0, "{}", String::from_utf8_lossy(&ft.stderr));
    let ckpt = d.join("f").join("final.eat");

    let json = d.join("report.json");
    let e1 = eat(&["evaluate", "--ckpt", s(&ckpt), "--manifest", s(&tones.test), "--json", s(&json)]);
    let e2 = eat(&["evaluate", "--ckpt", s(&ckpt), "--manifest", s(&tones.test)]);
    assert_eq!(code(&e1), 0, "{}", String::from_utf8_lossy(&e1.stderr));
    assert_eq!(e1.stdout, e2.stdout);
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert_eq!(r["prediction_mode"], "mean");
    assert_eq!(r["clips"], 2);
    assert!(r["accuracy"].as_f64().is_some());

    // A pre-training checkpoint cannot be scored and unlabelled data cannot be fine-tuned on.
    assert_eq!(code(&eat(&["evaluate", "--ckpt", s(&init), "--manifest", s(&tones.test)])), 2);
    let unlabeled = eat(&[
        "finetune", "--config", s(&conf), "--init", s(&init), "--manifest", s(&corpus), "--out", s(&d.join("g")),
    ]);
    assert_eq!(code(&unlabeled), 2);
}
