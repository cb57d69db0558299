use cgh_core::config::{BackboneId, ContextVariant, DatasetId, TrainConfig};
use cgh_core::data::{load_splits, Splits};
use cgh_core::run::RunDir;
use cgh_core::train::{pretrain, PretrainOptions, TrainState};

fn small_cfg(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::new(DatasetId::Synthetic, BackboneId::ResnetTiny);
    c.data.image_size = Some(16);
    c.data.synthetic_classes = 4;
    c.data.synthetic_train_per_class = 8;
    c.data.synthetic_val_per_class = 4;
    c.hidden_dim = 32;
    c.embed_dim = 16;
    c.hyper_dim = 16;
    c.batch_size = 8;
    c.bank_size = 32;
    c.epochs = 3;
    c.base_lr = 0.05;
    c.seed = seed;
    c
}

fn splits(cfg: &TrainConfig) -> Splits {
    load_splits(cfg).unwrap()
}

#[test]
fn resume_reproduces_uninterrupted_metrics() {
    let mut cfg = small_cfg(1);
    cfg.use_predictor = true;
    cfg.monitor.knn_every = 1;
    cfg.monitor.knn_k = 5;
    cfg.monitor.pr_analysis = true;
    let sp = splits(&cfg);
    let root = tempfile::tempdir().unwrap();
    let full = pretrain(&cfg, &sp, &PretrainOptions { run_root: root.path().join("a"), ..Default::default() }).unwrap();

    let first = pretrain(
        &cfg,
        &sp,
        &PretrainOptions { run_root: root.path().join("b"), stop_after_epoch: Some(1), ..Default::default() },
    )
    .unwrap();
    assert_eq!(first.metrics.len(), 4);
    let resumed = pretrain(&cfg, &sp, &PretrainOptions { resume: Some(first.run_dir.clone()), ..Default::default() }).unwrap();

    let log = RunDir::open(&first.run_dir).unwrap().read_metrics().unwrap();
    assert_eq!(log.len(), full.metrics.len());
    for (a, b) in log.iter().zip(&full.metrics) {
        assert!(a.same_values(b), "{a:?} vs {b:?}");
    }
    assert_eq!(resumed.metrics.len(), 8);
    let a = TrainState::load(&full.checkpoint).unwrap();
    let b = TrainState::load(&resumed.checkpoint).unwrap();
    assert_eq!(a.model.teacher.params.digest(), b.model.teacher.params.digest());
    assert_eq!(a.bank, b.bank);

    let run = RunDir::open(&full.run_dir).unwrap();
    assert_eq!(run.read_metrics().unwrap().len(), 12);
    assert_eq!(full.knn_curve.len(), 3);
    // global + hypercolumn, six thresholds, three epochs
    assert_eq!(run.read_pr().unwrap().len(), 36);
    assert!(run.path().join("checkpoints/epoch-0003.ckpt").exists());
}

#[test]
fn metrics_log_has_one_parseable_line_per_step() {
    let mut cfg = small_cfg(2);
    cfg.context = ContextVariant::Global;
    cfg.layer_set = vec![4];
    cfg.epochs = 1;
    let sp = splits(&cfg);
    let root = tempfile::tempdir().unwrap();
    let out = pretrain(&cfg, &sp, &PretrainOptions { run_root: root.path().to_path_buf(), ..Default::default() }).unwrap();
    let text = std::fs::read_to_string(out.run_dir.join("metrics.jsonl")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    for (i, l) in lines.iter().enumerate() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert_eq!(v["step"], i + 1);
        for k in ["epoch", "L", "L_gh", "L_hg", "lr", "step_time_ms"] {
            assert!(v.get(k).is_some(), "missing {k}");
        }
        assert_eq!(v["L_hg"], 0.0);
    }
}

#[test]
fn smoke_run_loss_decreases() {
    for seed in 0..3 {
        smoke_run(seed);
    }
}

fn smoke_run(seed: u64) {
    let mut cfg = small_cfg(seed);
    cfg.data.image_size = Some(16);
    cfg.data.synthetic_classes = 8;
    cfg.data.synthetic_train_per_class = 64;
    cfg.batch_size = 32;
    cfg.bank_size = 256;
    cfg.epochs = 4; // 16 steps per epoch over 512 images
    cfg.base_lr = 0.05;
    let sp = splits(&cfg);
    assert_eq!(sp.train.len(), 512);
    let mut s = TrainState::new(&cfg).unwrap();
    let mut losses = Vec::new();
    while s.step < 50 {
        let order = s.epoch_order(sp.train.len(), s.epoch);
        for b in 0..16 {
            if s.step == 50 {
                break;
            }
            let lr = s.lr(sp.train.len()).unwrap();
            losses.push(s.train_step(&sp.train, &order[b * 32..(b + 1) * 32], lr).unwrap().loss);
        }
        s.epoch += 1;
    }
    let head = losses[0];
    let tail: f64 = losses[40..].iter().sum::<f64>() / 10.0;
    eprintln!("seed {seed}: first {head:.4} tail {tail:.4}");
    assert!(tail < 0.8 * head, "seed {seed}: {head} -> {tail}");
}
