use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use adaor_core::model::DenoiserNet;
use adaor_core::{Instruction, TaskKind};

fn adaor(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adaor")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A short vec run shared by the tests that only need a valid checkpoint.
fn checkpoint() -> &'static Path {
    static CKPT: OnceLock<(tempfile::TempDir, PathBuf)> = OnceLock::new();
    let (_, path) = CKPT.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vec.ckpt");
        let o = adaor(&["train", "--task", "vec", "--steps", "300", "--out", path.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        (dir, path)
    });
    path
}

fn ckpt() -> &'static str {
    checkpoint().to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&adaor(&[])), 1);
    assert_eq!(code(&adaor(&["sweep", "--bogus"])), 1);
    assert_eq!(code(&adaor(&["serve"])), 1);
    assert_eq!(code(&adaor(&["train", "--task", "cube", "--out", "x"])), 1);
    assert_eq!(code(&adaor(&["sweep", "--ckpt", "x", "--instruction", "a", "--alphas", "0,2"])), 1);
    assert_eq!(code(&adaor(&["--help"])), 0);
}

#[test]
fn runtime_errors_exit_two() {
    let o = adaor(&["eval", "--ckpt", "/nonexistent/ckpt"]);
    assert_eq!(code(&o), 2);
    let o = adaor(&["sweep", "--ckpt", ckpt(), "--instruction", "spin"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("available"), "{}", stderr(&o));
}

#[test]
fn training_is_reproducible_and_writes_loss_csv() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let p = dir.path().join(name);
        let o = adaor(&["train", "--task", "vec", "--steps", "40", "--seed", "3", "--out", p.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        std::fs::read(p).unwrap()
    };
    assert_eq!(run("a.ckpt"), run("b.ckpt"));
    let loss = std::fs::read_to_string(dir.path().join("a.ckpt.loss.csv")).unwrap();
    assert!(loss.lines().any(|l| l == "# steps=40"));
    let rows: Vec<&str> = loss.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "step,loss");
    assert_eq!(rows.len(), 41);
}

#[test]
fn zero_id_probability_leaves_id_row_at_init() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("noid.ckpt");
    let o = adaor(&["train", "--task", "vec", "--steps", "60", "--seed", "5", "--p-id", "0", "--out", p.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let trained = DenoiserNet::load(&p).unwrap();
    let init = DenoiserNet::init(5, TaskKind::Vec);
    assert_eq!(trained.embedding_row(Instruction::ID), init.embedding_row(Instruction::ID));
    assert_ne!(trained.embedding_row(Instruction(0)), init.embedding_row(Instruction(0)));
}

#[test]
fn sweep_outputs_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| {
        let png = dir.path().join(format!("{tag}.png"));
        let csv = dir.path().join(format!("{tag}.csv"));
        let o = adaor(&[
            "sweep", "--ckpt", ckpt(), "--instruction", "scale", "--alphas", "0:1:6", "--variant", "cfgid",
            "--seed", "2", "--case-seed", "9", "--png", png.to_str().unwrap(), "--csv", csv.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        (std::fs::read(png).unwrap(), std::fs::read_to_string(csv).unwrap())
    };
    let (png, csv) = run("a");
    assert_eq!((png.clone(), csv.clone()), run("b"));
    assert_eq!(&png[1..4], b"PNG");
    assert!(csv.lines().any(|l| l == "# variant=cfgid"));
    assert!(csv.lines().any(|l| l.starts_with("case_id,variant,")));
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 1 + 6 + 2);
}

#[test]
fn eval_report_has_one_aggregate_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| {
        let report = dir.path().join(format!("{tag}.csv"));
        let o = adaor(&[
            "eval", "--ckpt", ckpt(), "--n-cases", "2", "--variants", "adaor,cfg", "--report",
            report.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        std::fs::read_to_string(report).unwrap()
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    assert_eq!(a.lines().filter(|l| l.starts_with("median,")).count(), 2);
}

#[test]
fn oracle_on_untrained_net_reports_and_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("init.ckpt");
    DenoiserNet::init(0, TaskKind::Vec).save(&p).unwrap();
    let report = dir.path().join("oracle.csv");
    let o = adaor(&["oracle-id", "--ckpt", p.to_str().unwrap(), "--t-grid", "0.5", "--report", report.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(std::fs::read_to_string(report).unwrap().starts_with('#'));
}

#[test]
fn gradcheck_default_seed_passes() {
    let o = adaor(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}
