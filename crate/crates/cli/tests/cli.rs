use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_erasure-lab");
const SUBCOMMANDS: [&str; 6] = ["init", "capture", "edit", "probe", "eval", "sweep"];

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("ERASURE_LAB_SEED")
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn error_line(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().expect("stderr is not empty");
    serde_json::from_str(last).expect("last stderr line is JSON")
}

/// Compares `--help` of every subcommand with the committed text. Set
/// `UPDATE_GOLDEN=1` to rewrite the files.
#[test]
fn help_matches_golden_text() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    for name in std::iter::once("main").chain(SUBCOMMANDS) {
        let args: Vec<&str> = if name == "main" { vec!["--help"] } else { vec![name, "--help"] };
        let out = run_ok(&args);
        let text = String::from_utf8(out.stdout).unwrap();
        let path = dir.join(format!("{name}.txt"));
        if update {
            std::fs::write(&path, &text).unwrap();
        }
        let expected = std::fs::read_to_string(&path).unwrap_or_default();
        assert_eq!(text, expected, "help of `{name}` drifted from {}", path.display());
    }
}

#[test]
fn help_lists_every_flag() {
    let flags: [(&str, &[&str]); 6] = [
        ("init", &["--config", "--out", "--jobs"]),
        ("capture", &["--config", "--ckpt", "--anchors", "--template", "--concept", "--role", "--out"]),
        ("edit", &["--config", "--ckpt", "--forget", "--retain", "--no-retain", "--template", "--concept", "--mode", "--out", "--report"]),
        ("probe", &["--config", "--ckpt", "--concept", "--template", "--out"]),
        ("eval", &["--config", "--baseline", "--edited", "--concept", "--out"]),
        ("sweep", &["--config", "--ckpt", "--axis", "--values", "--modes", "--concept", "--out"]),
    ];
    for (cmd, expected) in flags {
        let text = String::from_utf8(run_ok(&[cmd, "--help"]).stdout).unwrap();
        for f in expected {
            assert!(text.contains(f), "`{cmd} --help` misses {f}");
        }
    }
}

#[test]
fn usage_errors_exit_two() {
    let out = run(&["init", "--out", "x.st", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("Usage:"), "{stderr}");
    assert_eq!(error_line(&out)["error"], "UsageError");

    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["init"]).status.code(), Some(2));
    assert_eq!(run(&["sweep", "--axis", "width", "--out", "t.csv"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_one_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[edit]\ntau_f = 1.5\n").unwrap();
    let out = run(&["init", "--config", p(&cfg), "--out", p(&dir.path().join("m.st"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = error_line(&out);
    assert_eq!(err["error"], "ValidationError");
    assert!(err["message"].as_str().unwrap().contains("edit.tau_f"));

    let out = run(&["eval", "--baseline", "missing.st", "--edited", "missing.st", "--out", "m.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"], "Io");
}

#[test]
fn init_is_reproducible_and_seed_env_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.st");
    let b = dir.path().join("b.st");
    let c = dir.path().join("c.st");
    run_ok(&["init", "--out", p(&a)]);
    run_ok(&["init", "--out", p(&b), "--jobs", "2"]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let out = Command::new(BIN)
        .args(["init", "--out", p(&c)])
        .env("ERASURE_LAB_SEED", "12345")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());

    let out = Command::new(BIN)
        .args(["init", "--out", p(&c)])
        .env("ERASURE_LAB_SEED", "seven")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"], "ValidationError");
}

#[test]
fn capture_from_anchor_file() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.st");
    let anchors = dir.path().join("forget.txt");
    let cfg = dir.path().join("run.toml");
    std::fs::write(&anchors, "# two anchors\na photo of pikachu\npikachu\n").unwrap();
    std::fs::write(&cfg, "[capture]\nn_lat = 2\nsteps = 3\n").unwrap();
    run_ok(&["init", "--out", p(&ckpt)]);
    let h = dir.path().join("h.st");
    run_ok(&["capture", "--config", p(&cfg), "--ckpt", p(&ckpt), "--anchors", p(&anchors), "--out", p(&h)]);
    let f = erasure_core::io::read_tensors(&h).unwrap();
    assert_eq!(f.tensors["H/forget/0"].shape(), (2 * 2 * 3, 16));
    assert_eq!(f.tensors["H/forget/2"].shape(), (2 * 2 * 3, 32));

    std::fs::write(&anchors, "a photo of gandalf\n").unwrap();
    let out = run(&["capture", "--ckpt", p(&ckpt), "--anchors", p(&anchors), "--out", p(&h)]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"], "VocabError");
}

/// init → edit → eval on defaults: the edited target proportion is below
/// the baseline in the metric report.
#[test]
fn edit_then_eval_lowers_target() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("base.st");
    let edited = dir.path().join("edited.st");
    let report = dir.path().join("edit.json");
    let metrics = dir.path().join("m.json");
    run_ok(&["init", "--out", p(&base)]);
    run_ok(&[
        "edit", "--ckpt", p(&base), "--mode", "activation", "--out", p(&edited), "--report", p(&report),
    ]);
    run_ok(&["eval", "--baseline", p(&base), "--edited", p(&edited), "--out", p(&metrics)]);

    let edit: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(edit["schema_version"], 1);
    assert_eq!(edit["forget_anchors"], 6);
    assert_eq!(edit["retain_anchors"], 54);
    assert_eq!(edit["layers"].as_array().unwrap().len(), 4);

    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    let before = m["baseline"]["target"].as_f64().unwrap();
    let after = m["edited"]["target"].as_f64().unwrap();
    assert!(after < before, "target {before} -> {after}");
    assert!(m["edited"]["attack"].is_null());
}

/// A single capture step erases less than the full trajectory.
#[test]
fn steps_sweep_degrades_with_one_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("steps.csv");
    run_ok(&[
        "sweep", "--axis", "steps", "--values", "1,10", "--modes", "activation", "--out", p(&table),
    ]);
    let text = std::fs::read_to_string(&table).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "target").unwrap();
    let targets: Vec<f64> = lines.map(|l| l.split(',').nth(col).unwrap().parse().unwrap()).collect();
    assert_eq!(targets.len(), 2);
    assert!(targets[0] > targets[1], "T=1 {} vs T=10 {}", targets[0], targets[1]);
}
