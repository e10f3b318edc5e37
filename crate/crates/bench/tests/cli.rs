use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vrsplit(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vrsplit"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

const CONFIG: &str = r#"{
    "problem": {"fixture": "problem.json"},
    "entries": [
        {"scheme": {"name": "saga"}},
        {"scheme": {"name": "svrg", "epochs": {"kind": "constant", "m": 16}}},
        {"scheme": {"name": "svrg-rand", "p": {"kind": "constant", "p": 0.125}}}
    ],
    "replicates": 3,
    "budget": 8,
    "seed": 11
}"#;

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let out = vrsplit(
        &[
            "gen",
            "--family",
            "quadratic",
            "--n",
            "8",
            "--d",
            "3",
            "--kappa",
            "5",
            "--out",
            "problem.json",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    fs::write(dir.path().join("config.json"), CONFIG).unwrap();
    dir
}

#[test]
fn gen_writes_a_loadable_problem() {
    let dir = setup();
    let text = fs::read_to_string(dir.path().join("problem.json")).unwrap();
    let p = vrsplit::FiniteSumProblem::from_json(&text).unwrap();
    assert_eq!((p.n(), p.dim()), (8, 3));
    let stdout = vrsplit(
        &["gen", "--family", "two-player-game", "--n", "4", "--d", "2"],
        dir.path(),
    );
    assert!(stdout.status.success());
    assert!(vrsplit::FiniteSumProblem::from_json(&String::from_utf8_lossy(&stdout.stdout)).is_ok());
}

#[test]
fn runs_are_reproducible_across_processes() {
    let dir = setup();
    for out in ["a", "b"] {
        let o = vrsplit(&["run", "config.json", "--out", out], dir.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = fs::read(dir.path().join("a/combined.csv")).unwrap();
    let b = fs::read(dir.path().join("b/combined.csv")).unwrap();
    assert_eq!(a, b);
    for name in ["saga.csv", "svrg.csv", "svrg-rand.csv"] {
        assert!(dir.path().join("a").join(name).exists());
    }
    let o = vrsplit(
        &["run", "config.json", "--out", "c", "--seed", "12"],
        dir.path(),
    );
    assert!(o.status.success());
    assert_ne!(fs::read(dir.path().join("c/combined.csv")).unwrap(), a);
}

#[test]
fn wrapper_flags() {
    let dir = setup();
    let o = vrsplit(
        &[
            "run",
            "config.json",
            "--out",
            "cat",
            "--catalyst",
            "--sigma",
            "auto",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = vrsplit(
        &[
            "run",
            "config.json",
            "--out",
            "async",
            "--async",
            "--tau",
            "4",
            "--delay-model",
            "cyclic:3",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = vrsplit(
        &[
            "run",
            "config.json",
            "--quick",
            "--gamma",
            "0.001",
            "--out",
            "q",
        ],
        dir.path(),
    );
    assert!(o.status.success());
    let combined = fs::read_to_string(dir.path().join("q/combined.csv")).unwrap();
    assert_eq!(combined.lines().count(), 2 + 21);
}

#[test]
fn failures_exit_nonzero() {
    let dir = setup();
    assert!(!vrsplit(&["run", "missing.json"], dir.path())
        .status
        .success());
    assert!(
        !vrsplit(&["run", "config.json", "--gamma", "-1"], dir.path())
            .status
            .success()
    );
    assert!(!vrsplit(
        &["run", "config.json", "--async", "--delay-model", "bogus"],
        dir.path()
    )
    .status
    .success());
    fs::write(
        dir.path().join("bad.json"),
        CONFIG.replace(
            r#"{"scheme": {"name": "saga"}}"#,
            r#"{"scheme": {"name": "sarah", "m": 0}}"#,
        ),
    )
    .unwrap();
    let o = vrsplit(&["run", "bad.json", "--out", "bad"], dir.path());
    assert!(!o.status.success());
    assert!(dir.path().join("bad/svrg.csv").exists());
}

#[test]
fn quick_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let o = vrsplit(
        &[
            "protocol",
            "--family",
            "quadratic",
            "--quick",
            "--out",
            "proto",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let combined = fs::read_to_string(dir.path().join("proto/combined.csv")).unwrap();
    assert!(combined.lines().nth(1).unwrap().ends_with(",saga,sarah"));
}
