use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mimgen::imageio::GrayImage;

fn mimgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mimgen"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(args: &[&str]) -> Output {
    let out = mimgen(args);
    assert_eq!(
        code(&out),
        0,
        "{args:?}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Small enough that both trainings finish in seconds.
const TINY: &str = r#"{
    "vq.codebook_k": 32,
    "vq.embed_d": 16,
    "vq.hidden": 8,
    "tokenizer_train.steps": 4,
    "tokenizer_train.batch_size": 4,
    "text.width": 16,
    "text.heads": 2,
    "text.layers": 1,
    "model.width": 16,
    "model.heads": 2,
    "model.mm_depth": 1,
    "model.sm_depth": 1,
    "model.text_width": 16,
    "model.cond_width": 16,
    "model.codebook_k": 32,
    "train.steps": 5,
    "train.batch_size": 4
}"#;

struct Trained {
    dir: tempfile::TempDir,
    tokenizer: PathBuf,
    model: PathBuf,
}

fn train() -> Trained {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let config = dir.path().join("tiny.json");
    std::fs::write(&config, TINY).unwrap();
    ok(&["datagen", "--n", "8", "--seed", "3", "--out", s(&data)]);
    assert!(data.join("7.ppm").exists());
    assert_eq!(std::fs::read_to_string(data.join("captions.txt")).unwrap().lines().count(), 8);

    let tokenizer = dir.path().join("tok.ckpt");
    let tok_log = dir.path().join("tok.log");
    ok(&[
        "train-tokenizer", "--data", s(&data), "--out", s(&tokenizer), "--config", s(&config),
        "--log", s(&tok_log),
    ]);
    assert_eq!(std::fs::read_to_string(&tok_log).unwrap().lines().count(), 4);

    let model = dir.path().join("t2i.ckpt");
    let log = dir.path().join("t2i.log");
    // The override wins over the file value of 5.
    ok(&[
        "train-t2i", "--data", s(&data), "--tokenizer", s(&tokenizer), "--out", s(&model),
        "--config", s(&config), "--set", "train.steps=3", "--log", s(&log), "--limit", "6",
    ]);
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 3);
    Trained { dir, tokenizer, model }
}

#[test]
fn full_pipeline_through_the_binary() {
    let t = train();
    let dir = t.dir.path();
    let out = dir.join("gen.png");
    let trace = dir.join("trace.csv");
    let tokens = dir.join("grid.json");
    let gen = |out: &Path, trace: &Path| {
        ok(&[
            "generate", "--tokenizer", s(&t.tokenizer), "--model", s(&t.model), "--caption",
            "a red circle on a blue background", "--steps", "6", "--seed", "11", "--out", s(out),
            "--trace", s(trace), "--tokens", s(&tokens),
        ]);
    };
    gen(&out, &trace);
    let csv = std::fs::read_to_string(&trace).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,masked_before,committed,min_confidence"));
    let committed: usize = lines.map(|l| l.split(',').nth(2).unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(committed, 64);
    assert!(tokens.exists());

    let again = dir.join("again.png");
    gen(&again, &dir.join("trace2.csv"));
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&again).unwrap());

    let mask = dir.join("mask.pgm");
    let region: Vec<bool> = (0..32 * 32).map(|i| i % 32 < 16).collect();
    GrayImage::from_mask(32, 32, &region).unwrap().save_pgm(&mask).unwrap();
    ok(&[
        "edit", "--tokenizer", s(&t.tokenizer), "--model", s(&t.model), "--image", s(&out), "--mask",
        s(&mask), "--caption", "a green square on a white background", "--steps", "4", "--out",
        s(&dir.join("edit.png")),
    ]);
    ok(&[
        "edit", "--tokenizer", s(&t.tokenizer), "--model", s(&t.model), "--image", s(&out),
        "--strength", "0.25", "--caption", "a green square on a white background", "--out",
        s(&dir.join("edit2.ppm")),
    ]);
    assert!(dir.join("edit.png").exists() && dir.join("edit2.ppm").exists());

    // Swapped checkpoints are a kind mismatch, not a crash.
    let swapped = mimgen(&[
        "generate", "--tokenizer", s(&t.model), "--model", s(&t.tokenizer), "--caption", "a red circle",
        "--out", s(&dir.join("x.png")),
    ]);
    assert_eq!(code(&swapped), 3);

    let wrong_mask = dir.join("small.pgm");
    GrayImage::from_mask(8, 8, &[true; 64]).unwrap().save_pgm(&wrong_mask).unwrap();
    let bad = mimgen(&[
        "edit", "--tokenizer", s(&t.tokenizer), "--model", s(&t.model), "--image", s(&out), "--mask",
        s(&wrong_mask), "--caption", "a red circle", "--out", s(&dir.join("y.png")),
    ]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn usage_and_configuration_errors_exit_with_two() {
    assert_eq!(code(&mimgen(&["frobnicate"])), 2);
    assert_eq!(code(&mimgen(&["verify", "--set", "nope.key=1"])), 2);
    assert_eq!(code(&mimgen(&["verify", "--set", "model.width=17"])), 2);
    assert_eq!(code(&mimgen(&["verify", "--suite", "everything"])), 2);
    assert_eq!(code(&mimgen(&["verify", "--schedule-table", "4-16"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let out = mimgen(&["train-tokenizer", "--data", s(&dir.path().join("missing")), "--out", s(&dir.path().join("t"))]);
    assert_eq!(code(&out), 3);
}

#[test]
fn schedule_table_prints_remaining_masks() {
    let out = ok(&["verify", "--schedule-table", "4:16"]);
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "0 16\n1 14\n2 11\n3 6\n4 0\n");
}

#[test]
fn verify_suites_pass() {
    let out = ok(&["verify", "--suite", "schedule,rope"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() > 3);
    assert!(text.lines().all(|l| l.split_whitespace().nth(1) == Some("PASS")), "{text}");
}
