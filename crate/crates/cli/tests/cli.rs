use std::path::Path;
use std::process::{Command, Output};

use kern_core::checkpoint::Checkpoint;
use kern_core::objectives::PretrainModel;
use kern_core::pipeline::{self, ENTITY_TABLE, KG_ENTITY};

fn kern(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_kern"));
    cmd.args(args).current_dir(dir).env("RUST_LOG", "warn").env_remove("KERN_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = kern(dir, args, &[]);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Small world, short TransE run and annotated corpus in `dir`.
fn prepared(dir: &Path) {
    ok(dir, &["synth-gen", "--out-dir", "w", "--sentences", "32"]);
    ok(dir, &["kg-train", "--triples", "w/triples.tsv", "--out", "kg.kern", "--epochs", "3"]);
    ok(
        dir,
        &[
            "annotate", "--corpus", "w/corpus.txt", "--gazetteer", "w/gazetteer.tsv", "--vocab", "w/vocab.txt",
            "--out", "ann.jsonl",
        ],
    );
}

const PRETRAIN: &[&str] = &["pretrain", "--corpus", "ann.jsonl", "--vocab", "w/vocab.txt", "--kg", "kg.kern"];

fn pretrain_args<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    PRETRAIN.iter().copied().chain(extra.iter().copied()).collect()
}

#[test]
fn zero_step_pretrain_is_fresh_init() {
    let dir = tempfile::tempdir().unwrap();
    prepared(dir.path());
    ok(dir.path(), &pretrain_args(&["--out", "p0.kern", "--steps", "0"]));
    let c = Checkpoint::load(&dir.path().join("p0.kern")).unwrap();
    let (loaded, snap) = pipeline::pretrain_model_from(&c).unwrap();
    assert_eq!(snap.step, 0);
    let kg = Checkpoint::load(&dir.path().join("kg.kern")).unwrap();
    let fresh = PretrainModel::new(snap.model.clone(), kg.f32(KG_ENTITY).unwrap().clone()).unwrap();
    assert_eq!(loaded.encoder.params, fresh.encoder.params);
    assert_eq!(c.f32(ENTITY_TABLE).unwrap(), kg.f32(KG_ENTITY).unwrap());
}

#[test]
fn loss_log_appends_under_one_header() {
    let dir = tempfile::tempdir().unwrap();
    prepared(dir.path());
    for _ in 0..2 {
        ok(
            dir.path(),
            &pretrain_args(&["--out", "p.kern", "--steps", "3", "--batch-size", "4", "--loss-log", "loss.csv"]),
        );
    }
    let log = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 7, "{log}");
    assert_eq!(lines[0], "step,total,dea,mlm,nsp");
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 5 && !l.starts_with("step")));
}

#[test]
fn config_file_overrides_and_seed_env() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth-gen", "--out-dir", "w", "--sentences", "16"]);
    std::fs::write(
        d.join("kg.conf"),
        "# short run\ntriples = w/triples.tsv\nepochs = 2   # two passes\n\nseed = 4\n",
    )
    .unwrap();
    let report: serde_json::Value =
        serde_json::from_str(&ok(d, &["kg-train", "--config", "kg.conf", "--out", "a.kern", "--json"])).unwrap();
    assert_eq!(report["triples"], 200);
    let a = Checkpoint::load(&d.join("a.kern")).unwrap();
    assert_eq!(a.snapshot["epochs"], 2);
    assert_eq!(a.snapshot["seed"], 4);

    // Command-line values win over the file; KERN_SEED wins over both.
    ok(d, &["kg-train", "--config", "kg.conf", "--out", "b.kern", "--seed", "9", "--epochs=3"]);
    let b = Checkpoint::load(&d.join("b.kern")).unwrap();
    assert_eq!((b.snapshot["epochs"].as_u64(), b.snapshot["seed"].as_u64()), (Some(3), Some(9)));
    let out = kern(d, &["kg-train", "--config", "kg.conf", "--out", "c.kern", "--seed", "9"], &[("KERN_SEED", "4")]);
    assert!(out.status.success());
    assert_eq!(std::fs::read(d.join("a.kern")).unwrap(), std::fs::read(d.join("c.kern")).unwrap());

    let text = ok(d, &["kg-train", "--config", "kg.conf", "--out", "a.kern"]);
    assert!(text.lines().any(|l| l.starts_with("hits_at_10: ")), "{text}");
}

fn failure(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = kern(dir, args, &[]);
    assert!(!out.status.success());
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn errors_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (code, err) = failure(d, &["kg-train", "--triples", "t.tsv", "--out", "x.kern", "--bogus", "1"]);
    assert_eq!(code, 2);
    assert!(err.contains("command=kg-train kind=config code=2"), "{err}");
    assert_eq!(failure(d, &["kg-train", "--out", "x.kern"]).0, 2);
    assert_eq!(failure(d, &["kg-train", "--triples", "missing.tsv", "--out", "x.kern"]).0, 3);

    std::fs::write(d.join("bad.tsv"), "Q1\tP1\n").unwrap();
    assert_eq!(failure(d, &["kg-train", "--triples", "bad.tsv", "--out", "x.kern"]).0, 5);

    std::fs::write(d.join("bad.kern"), b"not a checkpoint").unwrap();
    let (code, err) = failure(
        d,
        &["evaluate", "--checkpoint", "bad.kern", "--test", "t", "--vocab", "v", "--entities", "e"],
    );
    assert_eq!(code, 5, "{err}");
    assert!(err.starts_with("error: command=evaluate kind=format"));

    assert_eq!(failure(d, &["synth-gen", "--out-dir", "w", "--ambiguity", "abc"]).0, 2);
}
