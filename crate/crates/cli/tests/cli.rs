use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_order-verify"));
    c.env("ORDER_VERIFY_THREADS", "1");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

const SMALL_NET: &str = r#"{
  "backbone": {
    "stages": [{"channels": 4, "kernel": 3, "pool": 2}, {"channels": 8, "kernel": 3, "pool": 2}],
    "embed_dim": 8
  }
}"#;

/// A 24-clip corpus of 20-frame clips, a train shard and a small-net config.
fn fixture(dir: &Path) {
    let d = dir.to_str().unwrap();
    ok(&["--out", &format!("{d}/c"), "--seed", "3", "gen", "--n", "24", "--frames", "20"]);
    ok(&[
        "--out",
        &format!("{d}/s"),
        "sample",
        "--manifest",
        &format!("{d}/c/manifest.jsonl"),
        "--tau-max",
        "6",
        "--tau-min",
        "6",
        "--draws-per-clip",
        "4",
    ]);
    fs::write(dir.join("net.json"), SMALL_NET).unwrap();
}

#[test]
fn usage_errors_exit_2_and_help_exits_0() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["gen", "--n", "lots"]).status.code(), Some(2));
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn validation_errors_exit_1_and_name_the_field() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("o");
    let out = out.to_str().unwrap();

    let o = run(&["--out", out, "gen", "--n", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_clips"));

    let o = run(&["--out", out, "gen", "--kind", "comet"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("`kind`"));

    let cfg = t.path().join("bad.json");
    fs::write(&cfg, r#"{"corpus": {"size": "big"}}"#).unwrap();
    let o = run(&["--out", out, "--config", cfg.to_str().unwrap(), "gen"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("`corpus.size`"));
}

#[test]
fn gen_writes_manifest_and_echoes_config() {
    let t = tempfile::tempdir().unwrap();
    let c = t.path().join("c");
    ok(&["gen", "--kind", "pendulum", "--n", "10", "--seed", "1", "--out", c.to_str().unwrap()]);
    let manifest = fs::read_to_string(c.join("manifest.jsonl")).unwrap();
    let entries: Vec<Value> = manifest.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(entries.len(), 10);
    assert!(entries.iter().all(|e| e["label"] == entries[0]["label"]));

    let cfg = read_json(&c.join("config.json"));
    assert_eq!(cfg["seed"], 1);
    assert_eq!(cfg["corpus"]["n_clips"], 10);
    assert_eq!(cfg["corpus"]["seed"], 1);
    // Unset values show their defaults.
    assert_eq!(cfg["corpus"]["size"], 32);
}

#[test]
fn flags_override_config_file() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("cfg.json");
    fs::write(&cfg, r#"{"seed": 9, "corpus": {"n_clips": 5, "n_frames": 12}}"#).unwrap();
    let c = t.path().join("c");
    ok(&["--config", cfg.to_str().unwrap(), "--out", c.to_str().unwrap(), "gen", "--n", "3"]);
    let echoed = read_json(&c.join("config.json"));
    assert_eq!(echoed["corpus"]["n_clips"], 3);
    assert_eq!(echoed["corpus"]["n_frames"], 12);
    assert_eq!(echoed["corpus"]["seed"], 9);
    assert_eq!(fs::read_to_string(c.join("manifest.jsonl")).unwrap().lines().count(), 3);
}

#[test]
fn pretrain_is_deterministic_per_seed() {
    let t = tempfile::tempdir().unwrap();
    fixture(t.path());
    let d = t.path().to_str().unwrap();
    let train = |out: &str, seed: &str| {
        ok(&[
            "--out",
            &format!("{d}/{out}"),
            "--config",
            &format!("{d}/net.json"),
            "--seed",
            seed,
            "pretrain",
            "--shard",
            &format!("{d}/s/train.shard"),
            "--iterations",
            "5",
            "--batch-size",
            "8",
        ]);
        fs::read(t.path().join(out).join("model.ckpt")).unwrap()
    };
    let a = train("p1", "4");
    let b = train("p2", "4");
    let c = train("p3", "5");
    assert_eq!(a, b);
    assert_ne!(a, c);
    let metrics = fs::read_to_string(t.path().join("p1/metrics.csv")).unwrap();
    assert!(metrics.starts_with("iteration,loss,"));
}

#[test]
fn pretrain_reads_shard_from_config() {
    let t = tempfile::tempdir().unwrap();
    fixture(t.path());
    let d = t.path().to_str().unwrap();
    let cfg: Value = serde_json::from_str(SMALL_NET).unwrap();
    let mut cfg = cfg.as_object().unwrap().clone();
    cfg.insert("data".into(), serde_json::json!({ "shard": format!("{d}/s/train.shard") }));
    fs::write(t.path().join("cfg.json"), Value::Object(cfg).to_string()).unwrap();
    ok(&[
        "--out",
        &format!("{d}/p"),
        "--config",
        &format!("{d}/cfg.json"),
        "pretrain",
        "--task",
        "three_order",
        "--iterations",
        "2",
    ]);
    assert!(t.path().join("p/model.ckpt").exists());

    let o = run(&["--out", &format!("{d}/q"), "pretrain", "--iterations", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("`shard`"));
}

#[test]
fn downstream_commands_write_their_artifacts() {
    let t = tempfile::tempdir().unwrap();
    fixture(t.path());
    let d = t.path().to_str().unwrap();
    let manifest = format!("{d}/c/manifest.jsonl");
    let net = format!("{d}/net.json");
    ok(&[
        "--out",
        &format!("{d}/p"),
        "--config",
        &net,
        "pretrain",
        "--shard",
        &format!("{d}/s/train.shard"),
        "--iterations",
        "3",
    ]);
    let pre = format!("{d}/p/model.ckpt");

    // Pose finetune from the pretrained net, then a ten-point PCK curve.
    ok(&[
        "--out", &format!("{d}/f"), "--config", &net, "finetune", "--task", "pose", "--manifest", &manifest,
        "--init", &pre, "--iterations", "3",
    ]);
    ok(&[
        "--out", &format!("{d}/k"), "pck", "--ckpt", &format!("{d}/f/model.ckpt"), "--manifest", &manifest,
        "--split", "all", "--alphas", "0.05:0.5:0.05",
    ]);
    let csv = fs::read_to_string(t.path().join("k/pck.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "alpha,center,limb,mean");
    assert_eq!(lines.len(), 11);
    assert!(fs::read_to_string(t.path().join("k/pck.svg")).unwrap().starts_with("<svg"));

    // Classification finetune from scratch and its evaluation.
    ok(&[
        "--out", &format!("{d}/fc"), "--config", &net, "finetune", "--task", "classify", "--manifest", &manifest,
        "--iterations", "3",
    ]);
    ok(&["--out", &format!("{d}/e"), "eval", "--ckpt", &format!("{d}/fc/model.ckpt"), "--manifest", &manifest, "--split", "all"]);
    let acc = read_json(&t.path().join("e/eval.json"))["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    ok(&["--out", &format!("{d}/et"), "eval", "--ckpt", &pre, "--shard", &format!("{d}/s/train.shard")]);
    assert!(read_json(&t.path().join("et/eval.json"))["tuple_accuracy"].is_number());

    ok(&["--out", &format!("{d}/fi"), "fill", "--ckpt", &pre, "--manifest", &manifest, "--split", "all", "--trials", "8"]);
    assert_eq!(read_json(&t.path().join("fi/fill.json"))["trials"], 8);

    ok(&[
        "--out", &format!("{d}/n"), "nn", "--ckpt", &pre, "--manifest", &manifest, "--query-clip", "clip_00000", "--k", "3",
    ]);
    let nn = read_json(&t.path().join("n/nn.json"));
    let hits = nn["neighbors"].as_array().unwrap();
    assert_eq!(hits.len(), 3);
    assert!(hits.iter().all(|h| h["clip_id"] != "clip_00000"));

    ok(&[
        "--out", &format!("{d}/a"), "activations", "--ckpt", &pre, "--manifest", &manifest, "--layer", "conv1",
        "--unit", "0", "--k", "4",
    ]);
    assert_eq!(read_json(&t.path().join("a/activations.json"))["top"].as_array().unwrap().len(), 4);

    ok(&["--out", &format!("{d}/pl"), "plot", "--metrics", &format!("{d}/p/metrics.csv")]);
    assert!(fs::read_to_string(t.path().join("pl/plot.svg")).unwrap().contains("polyline"));

    for sub in ["p", "f", "k", "fc", "e", "fi", "n", "a", "pl"] {
        assert!(t.path().join(sub).join("config.json").exists(), "{sub} has no config.json");
    }
}
