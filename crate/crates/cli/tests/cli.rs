use std::path::Path;
use std::process::{Command, Output};

fn seqlink(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqlink"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn report(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Small corpus plus a short-training config in a fresh directory.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.toml"),
        "seed = 5\n[train]\nepochs = 2\nepisodes_per_doc = 2\n[synthetic]\nnum_docs = 30\nmentions_per_doc = 6\nseed = 9\n",
    )
    .unwrap();
    ok(seqlink(
        &["gen-corpus", "--config", "run.toml", "--out", "data"],
        dir.path(),
    ));
    dir
}

#[test]
fn reward_table_worked_example() {
    let dir = tempfile::tempdir().unwrap();
    let out = stdout(&ok(seqlink(
        &["reward-table", "--flags", "1110001", "--L", "7", "--t", "7"],
        dir.path(),
    )));
    let base = |name: &str| {
        out.lines()
            .find(|l| l.starts_with(name))
            .and_then(|l| l.split_whitespace().nth(1))
            .unwrap()
            .to_string()
    };
    assert_eq!(base("R1"), "-3");
    assert_eq!(base("R3"), "-27/7");
    assert_eq!(base("R2"), "-4");
}

#[test]
fn reward_table_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!seqlink(&["reward-table", "--flags", "11x"], dir.path())
        .status
        .success());
    assert!(!seqlink(&["reward-table", "--flags", "111", "--L", "4"], dir.path())
        .status
        .success());
}

#[test]
fn unknown_flags_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["reward-table", "--flags", "1", "--frobnicate"][..],
        &["train", "--nope"][..],
        &["teleport"][..],
    ] {
        assert_eq!(seqlink(args, dir.path()).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn missing_config_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = seqlink(
        &["train", "--config", "missing.cfg", "--data", "data", "--out", "m.json"],
        dir.path(),
    );
    assert!(!o.status.success());
    assert_ne!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.cfg"));
}

#[test]
fn offset_equals_unit_window_and_runs_reproduce() {
    let dir = workspace();
    let d = dir.path();
    let train = ["train", "--config", "run.toml", "--data", "data", "--out", "a.json"];
    let echoed = ok(seqlink(&train, d));
    let err = String::from_utf8_lossy(&echoed.stderr);
    assert!(err.contains("seed: 5") && err.contains("config hash:"));
    ok(seqlink(
        &["train", "--config", "run.toml", "--data", "data", "--out", "b.json"],
        d,
    ));
    assert_eq!(
        std::fs::read(d.join("a.json")).unwrap(),
        std::fs::read(d.join("b.json")).unwrap()
    );

    ok(seqlink(
        &[
            "eval",
            "--checkpoint",
            "a.json",
            "--data",
            "data",
            "--order",
            "offset",
            "--out",
            "off.json",
        ],
        d,
    ));
    ok(seqlink(
        &[
            "eval",
            "--checkpoint",
            "a.json",
            "--data",
            "data",
            "--order",
            "dynamic",
            "--window",
            "1",
            "--out",
            "w1.json",
        ],
        d,
    ));
    let (mut off, mut w1) = (report(&d.join("off.json")), report(&d.join("w1.json")));
    assert_eq!(off["strategy"], "offset");
    off["strategy"] = "".into();
    w1["strategy"] = "".into();
    assert_eq!(off, w1);
    assert_eq!(off["seed"], 5);

    ok(seqlink(
        &[
            "eval",
            "--checkpoint",
            "b.json",
            "--data",
            "data",
            "--out",
            "again.json",
        ],
        d,
    ));
    ok(seqlink(
        &[
            "eval",
            "--checkpoint",
            "a.json",
            "--data",
            "data",
            "--out",
            "first.json",
        ],
        d,
    ));
    assert_eq!(
        std::fs::read(d.join("again.json")).unwrap(),
        std::fs::read(d.join("first.json")).unwrap()
    );
}

#[test]
fn link_writes_one_record_per_mention() {
    let dir = workspace();
    let d = dir.path();
    ok(seqlink(
        &["train", "--config", "run.toml", "--data", "data", "--out", "m.json"],
        d,
    ));
    ok(seqlink(
        &[
            "link",
            "--checkpoint",
            "m.json",
            "--data",
            "data",
            "--out",
            "links.jsonl",
        ],
        d,
    ));
    let text = std::fs::read_to_string(d.join("links.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 30 * 6);
    assert!(records
        .iter()
        .all(|r| r["entity"].as_str().is_some_and(|e| !e.is_empty())));
}

#[test]
fn sweep_writes_csv_and_summary() {
    let dir = workspace();
    let d = dir.path();
    let o = ok(seqlink(
        &[
            "sweep", "--config", "run.toml", "--data", "data", "--axis", "window", "--values", "1,L", "--seeds", "0",
            "--out", "s.csv",
        ],
        d,
    ));
    let csv = std::fs::read_to_string(d.join("s.csv")).unwrap();
    assert!(csv.starts_with("window,gamma1,reward,seed,valid_f1,test_f1,offset_f1"));
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(stdout(&o).lines().count(), 3);
}

#[test]
fn grad_check_small() {
    let dir = tempfile::tempdir().unwrap();
    let out = stdout(&ok(seqlink(&["grad-check", "--seeds", "2"], dir.path())));
    assert!(out.contains("policy.b3"));
    assert!(out.lines().last().unwrap().starts_with("ok"));
}
