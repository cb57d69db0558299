use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
schema_version = 1
dataset = "synthetic"
backbone = "resnet-tiny"
epochs = 2
batch_size = 16
bank_size = 64
embed_dim = 16
hidden_dim = 32
hyper_dim = 16
layer_set = [3, 4]
context = "cross"
seed = 3

[data]
image_size = 16
synthetic_classes = 4
synthetic_train_per_class = 16
synthetic_val_per_class = 8

[monitor]
knn_every = 1
knn_k = 5
"#;

fn cgh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cgh")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn json_lines(out: &Output) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("stdout line {l:?}: {e}")))
        .collect()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "status {:?}\nstderr:\n{}", out.status, String::from_utf8_lossy(&out.stderr));
    out
}

fn pretrain_tiny(dir: &Path) -> PathBuf {
    let cfg = dir.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let runs = dir.join("runs");
    let out = ok(cgh(&["pretrain", "--config", cfg.to_str().unwrap(), "--runs", runs.to_str().unwrap()]));
    let rec = json_lines(&out).pop().unwrap();
    assert_eq!(rec["steps"], 8);
    PathBuf::from(rec["run_dir"].as_str().unwrap())
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(cgh(&["pretrain", "--bogus"]).status.code(), Some(2));
    assert_eq!(cgh(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.toml");
    let out = cgh(&["pretrain", "--config", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, TINY.replace("bank_size = 64", "bank_size = 0")).unwrap();
    assert_eq!(cgh(&["pretrain", "--config", cfg.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn pretrain_then_every_probe() {
    let dir = tempfile::tempdir().unwrap();
    let run = pretrain_tiny(dir.path());
    for f in ["config.toml", "manifest.json", "metrics.jsonl", "checkpoints/last.ckpt", "checkpoints/epoch-0002.ckpt"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 8);
    let r = run.to_str().unwrap();

    let knn = json_lines(&ok(cgh(&["knn-eval", "--checkpoint", r, "--k", "1,5"])));
    let best = knn.last().unwrap()["best_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&best));

    let lin = json_lines(&ok(cgh(&["linear-eval", "--checkpoint", r, "--epochs", "3", "--input", "hypercolumn"])));
    assert_eq!(lin[0]["input"], "hypercolumn");

    let ckpt = run.join("checkpoints/last.ckpt");
    let semi = json_lines(&ok(cgh(&["semi-eval", "--checkpoint", ckpt.to_str().unwrap(), "--fraction", "0.5", "--epochs", "1"])));
    assert_eq!(semi[0]["labeled"], 32);

    let pr = json_lines(&ok(cgh(&["pr-analysis", "--checkpoint", r, "--bank-samples", "20", "--role", "teacher"])));
    assert_eq!(pr.len(), 6);
    let recalls: Vec<f64> = pr.iter().map(|p| p["recall"].as_f64().unwrap()).collect();
    assert!(recalls.windows(2).all(|w| w[0] >= w[1]), "{recalls:?}");

    let emb = dir.path().join("e.bin");
    let ex = json_lines(&ok(cgh(&["export-embeddings", "--checkpoint", r, "--layer", "projected", "--out", emb.to_str().unwrap()])));
    assert_eq!((ex[0]["rows"].as_u64(), ex[0]["dim"].as_u64()), (Some(64), Some(16)));
    let f = cgh_core::eval::read_embeddings(&emb).unwrap();
    assert_eq!(f.ids.len(), 64);
}

#[test]
fn ablate_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY.replace("epochs = 2", "epochs = 1")).unwrap();
    let runs = dir.path().join("sweep");
    let out = ok(cgh(&[
        "ablate", "--config", cfg.to_str().unwrap(), "--field", "tau_h", "--values", "0.04,0.1", "--runs", runs.to_str().unwrap(),
    ]));
    let rows = json_lines(&out);
    assert_eq!(rows.len(), 2);
    assert_eq!(std::fs::read_dir(&runs).unwrap().count(), 2);
    for r in rows {
        assert!(r["final_loss"].as_f64().unwrap().is_finite());
    }
}
