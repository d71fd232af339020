use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn siamtpn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_siamtpn"))
        .args(args)
        .env_remove("SIAMTPN_THREADS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn path(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_string_lossy().into_owned()
}

/// A few training steps of a narrow toy model; enough to exercise the plumbing.
fn quick_weights(dir: &TempDir) -> String {
    let w = path(dir, "w.bin");
    let out = siamtpn(&[
        "train-toy",
        "--steps",
        "3",
        "--seed",
        "2",
        "--channels",
        "8",
        "--out",
        &w,
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    w
}

fn read_json(p: &str) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(code(&siamtpn(&["--help"])), 0);
    assert_eq!(code(&siamtpn(&["--version"])), 0);
    assert_eq!(code(&siamtpn(&["track", "--help"])), 0);
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&siamtpn(&[])), 1);
    assert_eq!(code(&siamtpn(&["frobnicate"])), 1);
    assert_eq!(code(&siamtpn(&["bench", "--reps", "many"])), 1);
    let out = siamtpn(&["bench", "--reps", "3"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("at least 10"));
    assert_eq!(
        code(&siamtpn(&["train-toy", "--out", "x.bin", "--pairs", "0"])),
        1
    );
}

#[test]
fn data_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let out = siamtpn(&[
        "track",
        &path(&dir, "missing"),
        "--out",
        &path(&dir, "r.json"),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("missing"));

    let bad_cfg = path(&dir, "bad.cfg");
    fs::write(&bad_cfg, "heads = 3\nbogus_key = 1\n").unwrap();
    assert_eq!(code(&siamtpn(&["flops", "--config", &bad_cfg])), 2);
    assert_eq!(code(&siamtpn(&["flops", "--channels", "0"])), 2);
}

#[test]
fn train_track_and_reload() {
    let dir = TempDir::new().unwrap();
    let w = quick_weights(&dir);
    assert!(fs::read(&w).unwrap().starts_with(b"siamtpn-weights\n"));

    let report = path(&dir, "r.json");
    let csv = path(&dir, "curve.csv");
    let out = siamtpn(&[
        "track",
        "--synthetic",
        "easy:8:7:3",
        "--weights",
        &w,
        "--out",
        &report,
        "--csv",
        &csv,
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("synthetic-7-3"));

    let r = read_json(&report);
    assert_eq!(r["ious"].as_array().unwrap().len(), 7);
    assert_eq!(r["thresholds"].as_array().unwrap().len(), 21);
    let auc = r["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert!(r["failure"].is_null());
    let lines: Vec<String> = fs::read_to_string(&csv)
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    assert_eq!(lines[0], "threshold,success");
    assert_eq!(lines.len(), 22);

    // Tracking is deterministic for fixed weights and sequence.
    let again = path(&dir, "r2.json");
    siamtpn(&[
        "track",
        "--synthetic",
        "easy:8:7:3",
        "--weights",
        &w,
        "--out",
        &again,
    ]);
    assert_eq!(read_json(&again)["ious"], r["ious"]);
}

#[test]
fn weights_problems_are_reported_with_codes() {
    let dir = TempDir::new().unwrap();
    let w = quick_weights(&dir);
    let report = path(&dir, "r.json");

    let out = siamtpn(&[
        "track",
        "--synthetic",
        "easy:4:7:3",
        "--weights",
        &w,
        "--out",
        &report,
        "--channels",
        "16",
    ]);
    assert_eq!(code(&out), 2);
    assert!(
        stderr(&out).contains("weights error 13"),
        "{}",
        stderr(&out)
    );

    let bytes = fs::read(&w).unwrap();
    let cut = path(&dir, "cut.bin");
    fs::write(&cut, &bytes[..bytes.len() - 16]).unwrap();
    let out = siamtpn(&[
        "track",
        "--synthetic",
        "easy:4:7:3",
        "--weights",
        &cut,
        "--out",
        &report,
    ]);
    assert_eq!(code(&out), 2);
    assert!(
        stderr(&out).contains("weights error 16"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn eval_suite_file_with_thread_cap() {
    let dir = TempDir::new().unwrap();
    let w = quick_weights(&dir);
    let suite = path(&dir, "suite.txt");
    let spec = path(&dir, "spec.json");
    fs::write(
        &spec,
        r#"{"frames": 6, "width": 128, "height": 96, "start": {"cx": 60.0, "cy": 50.0, "w": 24.0, "h": 20.0},
            "trajectory": {"kind": "sinusoidal", "ax": 6.0, "ay": 3.0, "period": 12.0},
            "size_rate": 0.0, "texture_seed": 3, "seed": 9, "distractor": true, "noise": 0.02}"#,
    )
    .unwrap();
    fs::write(&suite, "# two sequences\neasy:6:7:1\n\nspec.json\n").unwrap();

    let json = path(&dir, "eval.json");
    let curves = path(&dir, "curves");
    let out = Command::new(env!("CARGO_BIN_EXE_siamtpn"))
        .args([
            "eval",
            "--suite",
            &suite,
            "--weights",
            &w,
            "--out",
            &json,
            "--csv",
            &curves,
        ])
        .env("SIAMTPN_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("2 workers"));
    let v = read_json(&json);
    assert_eq!(v["sequences"].as_array().unwrap().len(), 2);
    assert!(v["mean_auc"].as_f64().unwrap() <= 1.0);
    assert_eq!(fs::read_dir(&curves).unwrap().count(), 2);

    let bad = Command::new(env!("CARGO_BIN_EXE_siamtpn"))
        .args(["eval", "--suite", &suite, "--weights", &w])
        .env("SIAMTPN_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&bad), 1);
}

#[test]
fn attention_export_writes_images() {
    let dir = TempDir::new().unwrap();
    let w = quick_weights(&dir);
    let out_dir = path(&dir, "attn");
    let out = siamtpn(&[
        "attn-export",
        "--weights",
        &w,
        "--sequence",
        "easy:5:7:1",
        "--frame",
        "2",
        "--out",
        &out_dir,
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for (name, magic) in [
        ("p3.pgm", "P5"),
        ("p4.pgm", "P5"),
        ("p5.pgm", "P5"),
        ("crop.ppm", "P6"),
    ] {
        let bytes = fs::read(Path::new(&out_dir).join(name)).unwrap();
        assert!(bytes.starts_with(magic.as_bytes()), "{name}");
    }
    let out = siamtpn(&[
        "attn-export",
        "--weights",
        &w,
        "--sequence",
        "easy:5:7:1",
        "--frame",
        "5",
        "--out",
        &out_dir,
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn flops_config_file_and_flag_precedence() {
    let dir = TempDir::new().unwrap();
    let cfg = path(&dir, "model.cfg");
    fs::write(
        &cfg,
        "backbone = toy\nchannels = 32\nheads = 2\nblocks = 1\n",
    )
    .unwrap();
    let out = siamtpn(&["flops", "--config", &cfg, "--json"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let a: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();

    let out = siamtpn(&[
        "flops",
        "--config",
        &cfg,
        "--set",
        "channels=48",
        "--channels",
        "16",
        "--json",
    ]);
    let b: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(b["params"].as_u64().unwrap() < a["params"].as_u64().unwrap());
}

#[test]
fn paired_bench_from_config_files() {
    let dir = TempDir::new().unwrap();
    let a = path(&dir, "a.cfg");
    let b = path(&dir, "b.cfg");
    fs::write(
        &a,
        "backbone = toy\nchannels = 16\nheads = 2\nblocks = 1\nr_cross = 4,2,1\n",
    )
    .unwrap();
    fs::write(
        &b,
        "backbone = toy\nchannels = 16\nheads = 2\nblocks = 1\nr_cross = 1,1,1\n",
    )
    .unwrap();
    let json = path(&dir, "bench.json");
    let out = siamtpn(&["bench", "--reps", "10", "--paired", &a, &b, "--json", &json]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v = read_json(&json);
    assert_eq!(v["secs_a"].as_array().unwrap().len(), 10);
    assert!(v["attention_flops_a"].as_u64() < v["attention_flops_b"].as_u64());
}
