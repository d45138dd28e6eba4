use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--layers",
    "1",
    "--heads",
    "2",
    "--head-dim",
    "8",
    "--gen-len",
    "12",
    "--window",
    "4",
];

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_entropycache"));
    cmd.env_remove("ENTROPYCACHE_SEED");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn run_small(extra: &[&str]) -> Output {
    let mut args = vec!["run"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    run(&args)
}

fn tokens(dir: &Path, id: &str) -> String {
    fs::read_to_string(dir.join(format!("{id}.tokens.txt"))).unwrap()
}

#[test]
fn never_skip_matches_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let out = run_small(&[
        "--grid",
        "policy=baseline,entropy-cache",
        "--tau",
        "-1",
        "--metrics-out",
        out_dir,
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(
        tokens(dir.path(), "baseline_w4_conf0.9_seed0"),
        tokens(dir.path(), "entropy-cache_taum1_k64_w4_conf0.9_seed0")
    );
}

#[test]
fn grid_writes_one_trace_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_small(&[
        "--grid",
        "tau=0.5,1.0,1.5",
        "k=32,64",
        "--metrics-out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let traces = fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .ends_with(".steps.jsonl")
        })
        .count();
    assert_eq!(traces, 6);
    let table = fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
    assert_eq!(table.lines().count(), 7);
    let header = table.lines().next().unwrap();
    for col in [
        "policy",
        "tau",
        "k",
        "w",
        "steps",
        "tokens_per_sec",
        "mean_recompute_ratio",
        "decision_time_fraction",
        "flops_total",
    ] {
        assert!(header.split(',').any(|c| c == col), "missing {col}");
    }
}

#[test]
fn trace_lines_are_step_records() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_small(&["--metrics-out", dir.path().to_str().unwrap()]);
    assert!(out.status.success());
    let text = tokens(dir.path(), "entropy-cache_tau1.5_k64_w4_conf0.9_seed0");
    assert!(!text.is_empty());
    let jsonl = fs::read_to_string(
        dir.path()
            .join("entropy-cache_tau1.5_k64_w4_conf0.9_seed0.steps.jsonl"),
    )
    .unwrap();
    for line in jsonl.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["max_entropy"].is_number());
        assert!(v["phase_times"]["decision"].is_number());
    }
}

#[test]
fn csv_format_and_drift_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_small(&[
        "--policy",
        "baseline",
        "--drift",
        "--exclude-eos",
        "--pca-positions",
        "0,5",
        "--format",
        "csv",
        "--metrics-out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for suffix in ["steps.csv", "drift.csv", "pca.csv"] {
        assert!(dir
            .path()
            .join(format!("baseline_w4_conf0.9_seed0.{suffix}"))
            .exists());
    }
    let drift = dir.path().join("baseline_w4_conf0.9_seed0.drift.csv");
    let out = run(&[
        "plot-data",
        drift.to_str().unwrap(),
        "--columns",
        "log10_entropy,log10_drift",
    ]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("# log10_entropy log10_drift"));
    for line in lines {
        let cols: Vec<f64> = line.split(' ').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cols.len(), 2);
    }
    let bad = run(&["plot-data", drift.to_str().unwrap(), "--columns", "nope"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_one() {
    for args in [
        vec!["run", "--policy", "nope"],
        vec!["run", "--format", "xml"],
        vec!["run", "--drift"],
        vec!["run", "--exclude-eos", "--policy", "baseline"],
        vec!["run", "--grid", "bogus=1"],
        vec!["run", "--window", "0"],
        vec!["run", "--vocab", "100"],
        vec!["run", "--not-a-flag"],
        vec!["frobnicate"],
    ] {
        let out = run(&args);
        assert_eq!(
            out.status.code(),
            Some(1),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.ecw");
    fs::write(&path, b"ECW1 but not really").unwrap();
    let out = run(&["run", "--weights", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seed_env_fallback_and_weights_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.ecw");
    let out = bin()
        .env("ENTROPYCACHE_SEED", "7")
        .args([
            "init-weights",
            "--layers",
            "1",
            "--heads",
            "2",
            "--head-dim",
            "8",
            "--out",
            path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let from_file = run(&[
        "run",
        "--weights",
        path.to_str().unwrap(),
        "--gen-len",
        "12",
        "--window",
        "4",
    ]);
    assert!(
        from_file.status.success(),
        "{}",
        String::from_utf8_lossy(&from_file.stderr)
    );
    let from_seed = bin()
        .env("ENTROPYCACHE_SEED", "7")
        .args([
            "run",
            "--layers",
            "1",
            "--heads",
            "2",
            "--head-dim",
            "8",
            "--gen-len",
            "12",
            "--window",
            "4",
        ])
        .output()
        .unwrap();
    let first_line = |o: &Output| {
        String::from_utf8_lossy(&o.stdout)
            .lines()
            .next()
            .unwrap()
            .to_string()
    };
    assert_eq!(first_line(&from_file), first_line(&from_seed));
    assert!(first_line(&from_seed).contains("seed7"));

    let mismatch = run(&["run", "--weights", path.to_str().unwrap(), "--layers", "3"]);
    assert_eq!(mismatch.status.code(), Some(1));
}

#[test]
fn compare_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert!(run_small(&[
        "--grid",
        "policy=baseline,entropy-cache",
        "--metrics-out",
        d
    ])
    .status
    .success());
    let out = run(&["compare", d]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().count(), 3);
    assert!(text.contains("flop_speedup"));

    fs::remove_file(dir.path().join("baseline_w4_conf0.9_seed0.summary.json")).unwrap();
    assert_eq!(run(&["compare", d]).status.code(), Some(2));
}

#[test]
fn prompt_sources() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("p.txt");
    fs::write(&file, "Hi").unwrap();
    let at = format!("@{}", file.display());
    let a = run_small(&["--prompt", &at]);
    let b = run_small(&["--prompt-ids", "72,105"]);
    let c = run_small(&["--prompt", "Hi"]);
    assert!(a.status.success() && b.status.success() && c.status.success());
    assert_eq!(
        a.stdout.split(|&b| b == b'\n').next(),
        b.stdout.split(|&b| b == b'\n').next()
    );
    assert_eq!(
        a.stdout.split(|&b| b == b'\n').next(),
        c.stdout.split(|&b| b == b'\n').next()
    );
    assert_eq!(
        run_small(&["--prompt", "@/does/not/exist"]).status.code(),
        Some(1)
    );
}
