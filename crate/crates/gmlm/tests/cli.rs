use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use gmlm::formats::metrics::read_metrics;
use gmlm::formats::{load_graph_json, load_json_report, Aggregate, SeedReport};
use serde_json::Value;

fn gmlm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmlm")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["synth", "--nodes", "40", "--classes", "2", "--feature-dim", "4", "--vocab-size", "12", "--seed", "3"];
    args.extend_from_slice(extra);
    args.extend_from_slice(&["--out", p(&out)]);
    let o = gmlm(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

/// Writes a small, fast run config next to `graph`, with `patch` merged in,
/// and returns its path.
fn config(dir: &Path, graph: &Path, patch: &str) -> PathBuf {
    let mut cfg = serde_json::json!({
        "data": {"file": {"path": graph.file_name().unwrap().to_str().unwrap()}},
        "model": {"hidden_dim": 4, "text_dim": 8, "fused_dim": 6, "attention_heads": 2, "encoder_ff_dim": 12, "max_len": 8},
        "pretrain": {"epochs": 3},
        "finetune": {"max_epochs": 12, "patience": 4, "lr_graph": 1e-3, "lr_text": 1e-4, "lr_other": 1e-3},
        "split_ratios": [0.5, 0.25, 0.25],
        "seeds": [1, 2],
        "out_dir": "out"
    });
    if !patch.is_empty() {
        merge(&mut cfg, serde_json::from_str(patch).unwrap());
    }
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn train(cfg: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--config", p(cfg)];
    args.extend_from_slice(extra);
    gmlm(&args)
}

#[test]
fn synth_is_deterministic_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = gmlm(&["synth", "--nodes", "200", "--classes", "4", "--heterophily", "0.8", "--seed", "1", "--out", p(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("nodes=200"));
        out
    };
    let (a, b) = (run("a.json"), run("b.json"));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let g = load_graph_json(&a).unwrap();
    assert_eq!(g.graph.num_nodes(), 200);
    assert_eq!(g.graph.num_classes(), 4);

    let bad = dir.path().join("bad.json");
    let o = gmlm(&["synth", "--heterophily", "1.2", "--out", p(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!bad.exists());

    let blocked = dir.path().join("file");
    std::fs::write(&blocked, "").unwrap();
    let o = gmlm(&["synth", "--out", p(&blocked.join("g.json"))]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn train_eval_and_dump() {
    let dir = tempfile::tempdir().unwrap();
    let graph = synth(dir.path(), "g.json", &[]);
    let cfg = config(dir.path(), &graph, "");
    let o = train(&cfg, &["--workers", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("out");
    assert!(out.join("vocab.json").is_file() && out.join("graph.json").is_file());
    for seed in [1, 2] {
        for file in ["splits.json", "pretrain.json", "checkpoint.json", "metrics.jsonl", "report.json"] {
            assert!(out.join(format!("seed-{seed}")).join(file).is_file(), "{file}");
        }
    }

    let seed1 = out.join("seed-1");
    let report: SeedReport = load_json_report(&seed1.join("report.json")).unwrap();
    let log = read_metrics(&seed1.join("metrics.jsonl")).unwrap();
    assert_eq!(log.iter().filter(|r| r.stage == "pretrain").count(), 3);
    let finetune: Vec<_> = log.iter().filter(|r| r.stage == "finetune").collect();
    assert_eq!(finetune.len(), report.epochs_run);
    let best = finetune.iter().map(|r| r.val_f1.unwrap()).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(best, report.val_f1);
    assert_eq!(finetune[report.best_epoch - 1].val_f1, Some(best));

    let ck = seed1.join("checkpoint.json");
    let eval = |split: &str| gmlm(&["eval", "--checkpoint", p(&ck), "--graph", p(&graph), "--split", split]);
    let (a, b) = (eval("val"), eval("val"));
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    let v: Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(v["macro_f1"].as_f64().unwrap(), report.val_f1);
    let t: Value = serde_json::from_slice(&eval("test").stdout).unwrap();
    assert_eq!(t["accuracy"].as_f64().unwrap(), report.test_acc);
    let o = eval("holdout");
    assert_eq!(o.status.code(), Some(2));

    let with_file = gmlm(&[
        "eval", "--checkpoint", p(&ck), "--graph", p(&graph), "--split", "val", "--splits", p(&seed1.join("splits.json")),
    ]);
    assert_eq!(with_file.stdout, a.stdout);

    for (which, width) in [("gnn", 8), ("text", 8), ("fused", 6)] {
        let dump = dir.path().join(format!("{which}.csv"));
        let o = gmlm(&["dump-embeddings", "--checkpoint", p(&ck), "--graph", p(&graph), "--which", which, "--out", p(&dump)]);
        assert!(o.status.success(), "{}", stderr(&o));
        let text = std::fs::read_to_string(&dump).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 41);
        assert!(lines[0].starts_with("id,label,d0"));
        assert!(lines.iter().all(|l| l.split(',').count() == width + 2));
    }
}

#[test]
fn aggregate_recomputes_from_seed_reports() {
    let dir = tempfile::tempdir().unwrap();
    let graph = synth(dir.path(), "g.json", &[]);
    let cfg = config(dir.path(), &graph, "");
    assert!(train(&cfg, &["--seeds", "4,5,6", "--skip-pretrain"]).status.success());
    let out = dir.path().join("out");
    let agg: Aggregate = load_json_report(&out.join("aggregate.json")).unwrap();
    let seeds: Vec<u64> = agg.runs.iter().map(|r| r.seed).collect();
    assert_eq!(seeds, vec![4, 5, 6]);
    let mut acc = Vec::new();
    let mut f1 = Vec::new();
    for seed in seeds {
        let r: SeedReport = load_json_report(&out.join(format!("seed-{seed}/report.json"))).unwrap();
        acc.push(r.test_acc);
        f1.push(r.test_f1);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert_eq!(agg.test_acc.mean, mean(&acc));
    assert_eq!(agg.test_f1.mean, mean(&f1));
    let m = mean(&acc);
    let std = (acc.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 3.0).sqrt();
    assert_eq!(agg.test_acc.std, std);
}

#[test]
fn skip_pretrain_and_init_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let graph = synth(dir.path(), "g.json", &[]);
    let cfg = config(dir.path(), &graph, "");
    assert!(train(&cfg, &["--seed", "1", "--out", p(&dir.path().join("a"))]).status.success());
    let o = train(&cfg, &["--seed", "1", "--skip-pretrain", "--out", p(&dir.path().join("b"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let b = dir.path().join("b/seed-1");
    assert!(!b.join("pretrain.json").exists());
    let log = read_metrics(&b.join("metrics.jsonl")).unwrap();
    assert!(log.iter().all(|r| r.stage == "finetune"));
    assert_eq!(log[0].epoch, 1);

    let init = dir.path().join("a/seed-1/pretrain.json");
    let o = train(&cfg, &["--seed", "1", "--init", p(&init), "--out", p(&dir.path().join("c"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let a: SeedReport = load_json_report(&dir.path().join("a/seed-1/report.json")).unwrap();
    let c: SeedReport = load_json_report(&dir.path().join("c/seed-1/report.json")).unwrap();
    assert_eq!(a, c, "fine-tuning from the saved pretraining stage reproduces the full run");
}

#[test]
fn invalid_inputs_exit_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let graph = synth(dir.path(), "g.json", &[]);
    let cfg = config(dir.path(), &graph, r#"{"finetune": {"max_epochs": 5, "patience": 5}}"#);
    let o = train(&cfg, &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());

    let cfg = config(dir.path(), &graph, r#"{"colour": 1}"#);
    let o = train(&cfg, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("run.json:"), "{}", stderr(&o));

    let cfg = config(dir.path(), Path::new("missing.json"), "");
    assert_eq!(train(&cfg, &[]).status.code(), Some(2));
}

#[test]
fn eval_rejects_mismatched_graph() {
    let dir = tempfile::tempdir().unwrap();
    let graph = synth(dir.path(), "g.json", &[]);
    let cfg = config(dir.path(), &graph, "");
    assert!(train(&cfg, &["--seed", "1", "--skip-pretrain"]).status.success());
    let other = synth(dir.path(), "wide.json", &["--feature-dim", "7"]);
    let ck = dir.path().join("out/seed-1/checkpoint.json");
    let o = gmlm(&["eval", "--checkpoint", p(&ck), "--graph", p(&other), "--split", "val"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("(7, 2, 2)") && err.contains("(4, 2, 2)"), "{err}");
}

#[test]
fn precomputed_text_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    let graph = synth(dir.path(), "g.json", &[]);
    let rows: String = (0..40)
        .map(|i| (0..8).map(|j| format!("{}", ((i * 8 + j) as f64 * 0.37).sin())).collect::<Vec<_>>().join(",") + "\n")
        .collect();
    let emb = dir.path().join("e.csv");
    std::fs::write(&emb, &rows).unwrap();
    let cfg = config(dir.path(), &graph, r#"{"text_source": {"precomputed": {"path": "e.csv"}}}"#);
    let o = train(&cfg, &["--seed", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ck = dir.path().join("out/seed-2/checkpoint.json");
    let o = gmlm(&["eval", "--checkpoint", p(&ck), "--graph", p(&graph)]);
    assert_eq!(o.status.code(), Some(2));
    let o = gmlm(&["eval", "--checkpoint", p(&ck), "--graph", p(&graph), "--embeddings", p(&emb)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let short = dir.path().join("short.csv");
    std::fs::write(&short, rows.lines().take(39).collect::<Vec<_>>().join("\n")).unwrap();
    let o = gmlm(&["eval", "--checkpoint", p(&ck), "--graph", p(&graph), "--embeddings", p(&short)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("39 embedding rows"));
}

#[test]
fn interrupted_run_keeps_finished_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let graph = synth(dir.path(), "g.json", &["--nodes", "120"]);
    let cfg = config(
        dir.path(),
        &graph,
        r#"{"model": {"hidden_dim": 32, "text_dim": 64, "fused_dim": 64}, "finetune": {"max_epochs": 5000, "patience": 4999}}"#,
    );
    let mut child = Command::new(env!("CARGO_BIN_EXE_gmlm"))
        .args(["train", "--config", p(&cfg), "--seed", "1", "--skip-pretrain"])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let log = dir.path().join("out/seed-1/metrics.jsonl");
    let start = Instant::now();
    while std::fs::read_to_string(&log).map_or(0, |t| t.lines().count()) < 3 {
        assert!(start.elapsed() < Duration::from_secs(120), "no progress");
        assert!(child.try_wait().unwrap().is_none(), "run ended early");
        std::thread::sleep(Duration::from_millis(20));
    }
    child.kill().unwrap();
    child.wait().unwrap();
    let records = read_metrics(&log).unwrap();
    assert!(records.len() >= 3);
    for (k, r) in records.iter().enumerate() {
        assert_eq!(r.epoch, k + 1);
    }
}
