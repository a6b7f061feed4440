use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stylize-atlas"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn text(out: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
}

const CONFIG: &str = r#"
[text]
global = "a swan made of cactus"
local = "cactus"

[pretrain]
iterations = 600
batch_pixels = 1024
eval_every = 100
target_psnr = 24.0

[pretrain.architecture]
hidden_width = 32
hidden_layers = 2
frequency_bands = 6

[train]
iterations = 3
"#;

fn project(root: &Path) -> String {
    let frames = root.join("frames");
    let out = run(&[
        "synth",
        "--out",
        frames.to_str().unwrap(),
        "--num-frames",
        "6",
        "--height",
        "32",
        "--width",
        "48",
    ]);
    assert!(out.status.success(), "{}", text(&out));
    let cfg = root.join("project.toml");
    fs::write(&cfg, CONFIG).unwrap();
    cfg.to_str().unwrap().to_string()
}

#[test]
fn full_pipeline_with_an_ablation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = project(dir.path());
    let frames = dir.path().join("frames");
    let outdir = dir.path().join("out");
    let common = [
        "--config",
        &cfg,
        "--frames",
        frames.to_str().unwrap(),
        "--out",
        outdir.to_str().unwrap(),
    ];
    let with = |cmd: &str, extra: &[&str]| {
        let mut args = vec![cmd];
        args.extend_from_slice(&common);
        args.extend_from_slice(extra);
        run(&args)
    };

    let out = with("stylize", &[]);
    assert_eq!(out.status.code(), Some(3), "{}", text(&out));
    assert!(text(&out).contains("stylize-atlas decompose"), "{}", text(&out));

    let out = with("decompose", &[]);
    assert!(out.status.success(), "{}", text(&out));
    assert!(text(&out).contains("PSNR"));

    let out = with("stylize", &["--disable", "temporal,sparsity", "--n-prefixes-global", "4", "--seed", "3"]);
    assert!(out.status.success(), "{}", text(&out));
    let log = fs::read_to_string(outdir.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["temporal"], 0.0);
        assert_eq!(v["sparsity"], 0.0);
        assert_eq!(v["disabled"], serde_json::json!(["temporal", "sparsity"]));
    }

    let out = with("stylize", &[]);
    assert!(out.status.success() && text(&out).contains("skipping"), "{}", text(&out));

    assert!(with("render", &[]).status.success());
    assert_eq!(fs::read_dir(outdir.join("render")).unwrap().count(), 6);
    let out = with("eval", &[]);
    assert!(out.status.success(), "{}", text(&out));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["background_leakage"].is_f64());
    assert!(outdir.join("eval_report.json").exists());
}

#[test]
fn bad_arguments_are_rejected() {
    let out = run(&["stylize", "--disable", "colour"]);
    assert!(!out.status.success());
    assert!(text(&out).contains("unknown loss term"), "{}", text(&out));

    let out = run(&["decompose", "--frames", "/nonexistent/frames"]);
    assert_eq!(out.status.code(), Some(2), "{}", text(&out));

    let out = run(&["config"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("[train]"));
}
