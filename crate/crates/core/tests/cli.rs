use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bqkd_core::config::RunConfig;
use bqkd_core::keyrate::{optimize_bias, BiasSearch};
use tempfile::TempDir;

const CONFIG: &str = "\
[source]
p_bx = 0.054
p_bz = 0.012

[alice]
q = 0.8

[bob]
q = 0.85

[session]
rounds = 100000
seed = 5
";

fn bqkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bqkd")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_is_deterministic_across_transports() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), CONFIG);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let run = |out: &Path, transport: &str| bqkd(&["simulate", "--config", s(&cfg), "--out", s(out), "--transport", transport]);
    assert_eq!(run(&a, "channel").status.code(), Some(0));
    assert_eq!(run(&b, "tcp").status.code(), Some(0));
    for name in ["report.json", "qber.csv", "transcript_x.csv", "transcript_z.csv", "final_key.bin"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let qber = fs::read_to_string(a.join("qber.csv")).unwrap();
    assert!(qber.starts_with("# config_digest="));
}

#[test]
fn seed_override_changes_output() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), CONFIG);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(bqkd(&["simulate", "--config", s(&cfg), "--out", s(&a)]).status.code(), Some(0));
    assert_eq!(bqkd(&["simulate", "--config", s(&cfg), "--out", s(&b), "--seed", "6"]).status.code(), Some(0));
    assert_ne!(fs::read(a.join("final_key.bin")).unwrap(), fs::read(b.join("final_key.bin")).unwrap());
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(bqkd(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(bqkd(&["simulate", "--config", s(&tmp.path().join("missing.toml"))]).status.code(), Some(2));
    assert_eq!(bqkd(&["simulate"]).status.code(), Some(1));

    let empty = write_config(tmp.path(), "[source]\n");
    let out = bqkd(&["simulate", "--config", s(&empty), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("alice.q") && stderr.contains("session.rounds"), "{stderr}");

    let weak = CONFIG.replace("p_bx = 0.054", "p_bx = 0.2").replace("p_bz = 0.012", "p_bz = 0.2")
        + "\n[cascade]\nnum_passes = 0\ns = 1\n";
    let weak = write_config(tmp.path(), &weak);
    let dir = tmp.path().join("weak");
    assert_eq!(bqkd(&["simulate", "--config", s(&weak), "--out", s(&dir)]).status.code(), Some(4));
    let left = fs::read_dir(&dir).map(|d| d.count()).unwrap_or(0);
    assert_eq!(left, 0);
}

#[test]
fn optimize_bias_curve_matches_library() {
    let tmp = TempDir::new().unwrap();
    let text = CONFIG.replace("rounds = 100000", "rounds = 30000000");
    let cfg = write_config(tmp.path(), &text);
    let dir = tmp.path().join("opt");
    let out = bqkd(&["optimize-bias", "--config", s(&cfg), "--out", s(&dir), "--grid"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let curve = fs::read_to_string(dir.join("curve.csv")).unwrap();
    let mut rows = curve.lines().filter(|l| !l.starts_with('#'));
    assert_eq!(rows.next(), Some("q,eps_x,eps_z,R"));
    let (q, _) = rows
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            (v[0], v[3])
        })
        .fold((0.0, f64::NEG_INFINITY), |best, p| if p.1 > best.1 { p } else { best });
    let lib = optimize_bias(&RunConfig::parse(&text).unwrap().optimize_input(), BiasSearch::Symmetric).unwrap();
    assert!((q - lib.best.q_a).abs() <= 0.0011, "{q} vs {}", lib.best.q_a);
    assert!(fs::read_to_string(dir.join("grid.csv")).unwrap().contains("q_a,q_b,R"));
}

#[test]
fn keyrate_prints_rate() {
    let out = bqkd(&["keyrate", "--q", "0.9", "--e-bx", "0.054", "--e-bz", "0.012", "--f-x", "1.31", "--f-z", "1.59", "--n-total", "1e7"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!out.stdout.is_empty());
    let bad = bqkd(&["keyrate", "--q", "1.5", "--e-bx", "0.05", "--e-bz", "0.01", "--f-x", "1.2", "--f-z", "1.2", "--n-total", "1e7"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn cascade_bench_writes_tables() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("bench");
    let out = bqkd(&["cascade-bench", "--runs", "10", "--qber-x", "0.054", "--qber-z", "0.012", "--out", s(&dir)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["block_sizes.csv", "errors_per_pass.csv", "summary.csv"] {
        assert!(dir.join(name).exists(), "{name}");
    }
    let blocks = fs::read_to_string(dir.join("block_sizes.csv")).unwrap();
    assert!(blocks.contains(",16") && blocks.contains(",72"), "{blocks}");
}

#[test]
fn compare_reports_from_files() {
    let tmp = TempDir::new().unwrap();
    let base = write_config(tmp.path(), &CONFIG.replace("q = 0.8", "q = 0.5").replace("q = 0.85", "q = 0.5"));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(bqkd(&["simulate", "--config", s(&base), "--out", s(&a)]).status.code(), Some(0));
    let biased = write_config(tmp.path(), CONFIG);
    assert_eq!(bqkd(&["simulate", "--config", s(&biased), "--out", s(&b)]).status.code(), Some(0));
    let dir = tmp.path().join("cmp");
    let out = bqkd(&[
        "compare",
        s(&a.join("report.json")),
        s(&b.join("report.json")),
        "--out",
        s(&dir),
        "--format",
        "json",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("compare.json")).unwrap()).unwrap();
    assert_eq!(doc[0]["efficiency_ratio_vs_baseline"], 1.0);
    assert!(doc[1]["efficiency_ratio_vs_baseline"].as_f64().unwrap() > 1.0);
    assert_eq!(bqkd(&["compare", s(&a.join("report.json"))]).status.code(), Some(1));
}
