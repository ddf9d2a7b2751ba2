use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_normcharts")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = bin(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn data(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data").join(name).display().to_string()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

#[test]
fn classifier_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    ok(&["synth-reports", "--n", "400", "--seed", "3", "-o", &p(t, "corpus")]);
    let reports = p(t, "corpus/reports.jsonl");
    let annotations = p(t, "corpus/annotations.jsonl");
    let corpus = ["--reports", reports.as_str(), "--annotations", annotations.as_str()];

    ok(&["ingest", "--reports", &reports, "-o", &p(t, "ingested.jsonl")]);
    ok(&[&["label"][..], &corpus, &["-o", &p(t, "labels.csv")]].concat());
    let labels = fs::read_to_string(t.join("labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 401);
    assert!(labels.lines().nth(1).unwrap().ends_with(",annotation"));

    for name in ["s1.csv", "s2.csv"] {
        ok(&[&["split", "--seed", "7", "--ratios", "0.8,0.1,0.1"][..], &corpus, &["-o", &p(t, name)]].concat());
    }
    assert_eq!(fs::read(t.join("s1.csv")).unwrap(), fs::read(t.join("s2.csv")).unwrap());

    let model = p(t, "model.nclm");
    ok(&[&["train", "--seed", "7", "--pos-weight", "10", "--mode", "full"][..], &corpus, &["-o", &model]].concat());
    let metrics = ok(&[&["eval", "--seed", "7", "--model", &model][..], &corpus].concat());
    assert!(metrics.starts_with("model,"), "{metrics}");
    assert!(metrics.contains("classifier,eval,full,test,7"), "{metrics}");
}

#[test]
fn triage_fixture_reproduces_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&[
        "triage",
        "--reports",
        &data("edge41_reports.jsonl"),
        "--annotations",
        &data("edge41_gold.jsonl"),
        "--fixture",
        &data("edge41_responses.tsv"),
        "--mode",
        "stepwise",
        "-o",
        &p(tmp.path(), "answers.tsv"),
    ]);
    assert!(out.contains("stepwise,gold,0,accuracy,0.756098,,1,7,9,24,1"), "{out}");
    assert_eq!(fs::read_to_string(tmp.path().join("answers.tsv")).unwrap().lines().count(), 42);
}

#[test]
fn growth_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    ok(&["synth-cohort", "--n", "200", "--seed", "4", "-o", &p(t, "phen.csv")]);
    ok(&["qc", "--phenotypes", &p(t, "phen.csv"), "-o", &p(t, "qc.csv")]);
    ok(&[
        "aggregate",
        "--phenotypes",
        &p(t, "phen.csv"),
        "--method",
        "mprage_only",
        "-o",
        &p(t, "sessions.csv"),
        "--drops",
        &p(t, "drops.csv"),
    ]);
    ok(&["fit-growth", "--sessions", &p(t, "sessions.csv"), "--fp", "0.5", "--fp", "-1,1", "-o", &p(t, "m.json")]);
    ok(&["centiles", "--model", &p(t, "m.json"), "--sessions", &p(t, "sessions.csv"), "-o", &p(t, "c.csv")]);
    ok(&["curves", "--model", &p(t, "m.json"), "--sex", "F", "--points", "10", "-o", &p(t, "curve.csv")]);
    ok(&["plot-data", "--model", &p(t, "m.json"), "-o", &p(t, "plots")]);
    let r = ok(&["compare", &p(t, "c.csv"), &p(t, "c.csv")]);
    assert!(r.trim().ends_with("r=1.000000"), "{r}");
    assert_eq!(fs::read_to_string(t.join("curve.csv")).unwrap().lines().count(), 11);
    assert!(t.join("plots/m_M.csv").exists());
}

#[test]
fn run_experiment_from_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(
        &cfg,
        format!(
            "seeds = [0]\n[paths]\nreports = {:?}\nannotations = {:?}\nfixtures = {:?}\n",
            data("edge41_reports.jsonl"),
            data("edge41_gold.jsonl"),
            data("edge41_responses.tsv")
        ),
    )
    .unwrap();
    let out_dir: PathBuf = tmp.path().join("runs");
    let stdout = ok(&[
        "--config",
        &cfg.display().to_string(),
        "--out",
        &out_dir.display().to_string(),
        "run-experiment",
        "exp5_stepwise",
    ]);
    let run = PathBuf::from(stdout.trim().strip_prefix("exp5_stepwise: ").unwrap());
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.contains("0.609") && metrics.contains("0.756"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "seeds = []\n").unwrap();
    let code = |args: &[&str]| bin(args).status.code().unwrap();
    assert_eq!(code(&["--config", &bad.display().to_string(), "run-experiment", "exp1_balanced"]), 2);
    assert_eq!(code(&["run-experiment", "exp9"]), 2);
    assert_eq!(code(&["run-experiment", "exp1_balanced", "--out", &p(tmp.path(), "r")]), 2);
    assert_eq!(code(&["split", "--ratios", "0.9,0.9,0.1", "-o", "x"]), 2);
    assert_eq!(code(&["qc", "--phenotypes", &p(tmp.path(), "missing.csv"), "-o", &p(tmp.path(), "o.csv")]), 3);
    fs::write(tmp.path().join("bad.csv"), "session_id\nx\n").unwrap();
    assert_eq!(code(&["qc", "--phenotypes", &p(tmp.path(), "bad.csv"), "-o", &p(tmp.path(), "o.csv")]), 3);
}
