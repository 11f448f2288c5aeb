use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bip_core::container::Container;
use bip_core::textgen::synthetic_text;

fn bip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bip"))
        .args(args)
        .output()
        .expect("spawn bip")
}

fn ok(args: &[&str]) -> Output {
    let out = bip(args);
    assert!(
        out.status.success(),
        "bip {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    corpus: PathBuf,
    model: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let corpus = root.join("corpus.txt");
    std::fs::write(&corpus, synthetic_text(5, 60_000)).unwrap();
    let init = root.join("init.bip");
    ok(&[
        "init", "--out", s(&init), "--d", "16", "--heads", "2", "--ffn", "32", "--blocks", "2",
        "--prenorm", "--seed", "3",
    ]);
    let model = root.join("trained.bip");
    let log = root.join("log.csv");
    ok(&[
        "train", "--model", s(&init), "--corpus", s(&corpus), "--out", s(&model), "--steps",
        "20", "--batch-size", "4", "--seq-len", "32", "--log", s(&log),
    ]);
    let log_text = std::fs::read_to_string(&log).unwrap();
    assert!(log_text.starts_with("step,loss,grad_norm\n"));
    assert_eq!(log_text.lines().count(), 21);
    Fixture {
        _dir: dir,
        root,
        corpus,
        model,
    }
}

#[test]
fn pipeline_commands_and_ratio_zero_identity() {
    let f = fixture();
    let cal = f.root.join("cal.bip");
    ok(&[
        "calibrate", "--model", s(&f.model), "--corpus", s(&f.corpus), "--out", s(&cal),
        "--samples", "8", "--seq-len", "32",
    ]);
    let scored = f.root.join("scored.bip");
    let out = ok(&["score", "--model", s(&cal), "--method", "bip", "--out", s(&scored)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("block 1: heads"));
    let c = Container::read(&scored).unwrap();
    assert!(c.stats().unwrap().is_some());
    assert!(c.scores("bip").unwrap().is_some());

    let same = f.root.join("same.bip");
    ok(&["prune", "--model", s(&cal), "--ratio", "0", "--method", "bip", "--out", s(&same)]);
    let dense = Container::read(&f.model).unwrap().to_model().unwrap();
    assert_eq!(Container::read(&same).unwrap().to_model().unwrap(), dense);

    let half = f.root.join("half.bip");
    ok(&[
        "prune", "--model", s(&f.model), "--corpus", s(&f.corpus), "--ratio", "0.5",
        "--samples", "8", "--seq-len", "32", "--out", s(&half),
    ]);
    let p = Container::read(&half).unwrap().to_model().unwrap();
    assert_eq!(p.blocks[0].ffn_width(), 16);
    assert_eq!(p.blocks[0].head_width(), 8);

    let report = f.root.join("report.txt");
    let csv = f.root.join("report.csv");
    ok(&[
        "eval", "--model", s(&f.model), "--corpus", s(&f.corpus), "--ratio", "0.2", "--method",
        "wanda", "--samples", "8", "--seq-len", "32", "--out", s(&report), "--csv", s(&csv),
    ]);
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.contains("perplexity_pruned = "));
    // prenorm models carry no bound slack
    assert!(!text.contains("bound_slack_min"));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 3);
}

#[test]
fn compare_is_byte_identical_across_runs_and_threads() {
    let f = fixture();
    let run = |name: &str, threads: &str| {
        let dir = f.root.join(name);
        ok(&[
            "compare", "--model", s(&f.model), "--corpus", s(&f.corpus), "--ratios", "0,0.5",
            "--samples", "8", "--seq-len", "32", "--eval-windows", "4", "--eval-bytes", "4096",
            "--out-dir", s(&dir), "--seed", "11", "--threads", threads,
        ]);
        dir
    };
    let a = run("a", "1");
    let b = run("b", "1");
    let c = run("c", "2");
    let mut names: Vec<_> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 1 + 5 * 2);
    for n in &names {
        let x = std::fs::read(a.join(n)).unwrap();
        assert_eq!(x, std::fs::read(b.join(n)).unwrap(), "{n:?}");
        assert_eq!(x, std::fs::read(c.join(n)).unwrap(), "{n:?}");
    }
    let csv = std::fs::read_to_string(a.join("compare.csv")).unwrap();
    let zero_ppl: Vec<&str> = csv
        .lines()
        .skip(1)
        .filter(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap() == 0.0)
        .map(|l| l.split(',').nth(4).unwrap())
        .collect();
    assert_eq!(zero_ppl.len(), 10);
    assert!(zero_ppl.iter().all(|p| *p == zero_ppl[0]));
}

#[test]
fn checks_and_exit_codes() {
    let out = ok(&["bound-check", "--trials", "60", "--activation", "gelu"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("failures 0"));

    assert_eq!(bip(&["prune", "--model", "m", "--out", "o", "--ratio", "1.0"]).status.code(), Some(2));
    assert_eq!(bip(&["bound-check", "--threads", "0"]).status.code(), Some(2));
    assert_eq!(bip(&["oracle", "--keep", "20"]).status.code(), Some(2));
    assert_eq!(bip(&["score", "--method", "llm-pruner", "--model", "m", "--out", "o"]).status.code(), Some(2));
    assert_eq!(bip(&["frobnicate"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.bip");
    std::fs::write(&bad, b"NOPE0000").unwrap();
    let out = bip(&["prune", "--model", s(&bad), "--out", s(&dir.path().join("o")), "--ratio", "0.1", "--method", "magnitude"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}
