use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use cgh_core::ablate::{ablate, format_table, AblationField};
use cgh_core::config::{load_config_with_overrides, TrainConfig};
use cgh_core::data::{load_splits, Splits};
use cgh_core::eval::{default_thresholds, FeatureKind, LinearRecipe, SemiRecipe, DEFAULT_KS, PR_ALPHAS};
use cgh_core::pipeline::{self, PrContext, Role};
use cgh_core::train::{pretrain, PretrainOptions, TrainState};

#[derive(Parser)]
#[command(name = "cgh", version, about = "Cross-context relational distillation: pretraining and probes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain an encoder into a new (or resumed) run directory.
    Pretrain(PretrainArgs),
    /// KNN accuracy of frozen features.
    KnnEval(KnnArgs),
    /// Linear probe on frozen global or hypercolumn features.
    LinearEval(LinearArgs),
    /// Fine-tune on a labeled fraction of the training split.
    SemiEval(SemiArgs),
    /// Precision/recall of thresholded teacher distributions.
    PrAnalysis(PrArgs),
    /// Write per-image embeddings to a binary file.
    ExportEmbeddings(ExportArgs),
    /// Sweep one config field and compare the runs.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override applied after defaults (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let path = self.config.as_ref().context("--config is required")?;
        Ok(load_config_with_overrides(path, &self.set)?)
    }
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Parent directory for run directories.
    #[arg(long, default_value = "runs")]
    runs: PathBuf,
    /// Continue this run directory from its last checkpoint.
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
    /// Stop after this many completed epochs.
    #[arg(long)]
    stop_after_epoch: Option<usize>,
    /// Epoch checkpoints to keep besides last.ckpt (0 keeps all).
    #[arg(long, default_value_t = 3)]
    keep_checkpoints: usize,
}

#[derive(Args)]
struct CheckpointArgs {
    /// Checkpoint file (`last.ckpt` or `epoch-NNNN.ckpt`) or a run directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Overrides for the data section of the stored config, e.g. `data.root=/data`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Encoder copy to evaluate.
    #[arg(long, default_value = "student")]
    role: String,
}

impl CheckpointArgs {
    fn load(&self) -> Result<(TrainState, Splits)> {
        let path = if self.checkpoint.is_dir() {
            self.checkpoint.join("checkpoints").join("last.ckpt")
        } else {
            self.checkpoint.clone()
        };
        let mut state = TrainState::load(&path).with_context(|| format!("loading {}", path.display()))?;
        if !self.set.is_empty() {
            let cfg = TrainConfig::from_toml_with_overrides(&state.cfg.to_toml_string(), &self.set)?;
            state.cfg.data = cfg.data;
        }
        let splits = load_splits(&state.cfg)?;
        Ok((state, splits))
    }

    fn role(&self) -> Result<Role> {
        Ok(self.role.parse()?)
    }
}

#[derive(Args)]
struct KnnArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    /// Comma-separated neighbour counts.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS.to_vec())]
    k: Vec<usize>,
    /// pooled, hypercolumn, projected or projected-hyper.
    #[arg(long, default_value = "pooled")]
    features: String,
}

#[derive(Args)]
struct LinearArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    /// global or hypercolumn.
    #[arg(long, default_value = "global")]
    input: String,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 3.0)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    /// Feed raw (unnormalized) features to the classifier.
    #[arg(long)]
    no_normalize: bool,
}

#[derive(Args)]
struct SemiArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    /// Labeled fraction in (0, 1].
    #[arg(long)]
    fraction: f64,
    /// Fine-tuning epochs (recipe default when omitted).
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate of the classifier head.
    #[arg(long)]
    head_lr: Option<f64>,
    /// Learning rate of the backbone.
    #[arg(long)]
    backbone_lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct PrArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    /// global or hypercolumn.
    #[arg(long, default_value = "hypercolumn")]
    context: String,
    /// Images used to fill the labeled bank (the rest are queries).
    #[arg(long, default_value_t = 1024)]
    bank_samples: usize,
    /// Threshold multipliers; thresholds are alpha / bank size.
    #[arg(long, value_delimiter = ',', default_values_t = PR_ALPHAS.to_vec())]
    alphas: Vec<f64>,
    /// Use the validation split instead of the training split.
    #[arg(long)]
    val: bool,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    /// pooled, hypercolumn, projected or projected-hyper.
    #[arg(long, default_value = "pooled")]
    layer: String,
    /// train or val.
    #[arg(long, default_value = "train")]
    split: String,
    /// Output file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// tau_h, context-variant or layer-set.
    #[arg(long)]
    field: String,
    /// Comma-separated values; layer sets are written like `1+4`.
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
    /// Parent directory for the sweep's run directories.
    #[arg(long, default_value = "runs")]
    runs: PathBuf,
    /// Run the sweep concurrently (one thread per value).
    #[arg(long)]
    parallel: bool,
}

fn emit(v: serde_json::Value) {
    println!("{v}");
}

fn run_pretrain(a: &PretrainArgs) -> Result<()> {
    let cfg = match &a.resume {
        Some(dir) => TrainState::load(&dir.join("checkpoints").join("last.ckpt"))
            .with_context(|| format!("resuming {}", dir.display()))?
            .cfg,
        None => a.cfg.load()?,
    };
    let splits = load_splits(&cfg)?;
    let opts = PretrainOptions {
        run_root: a.runs.clone(),
        resume: a.resume.clone(),
        stop_after_epoch: a.stop_after_epoch,
        keep_checkpoints: a.keep_checkpoints,
    };
    let out = pretrain(&cfg, &splits, &opts)?;
    let last = out.metrics.last();
    emit(json!({
        "run_dir": out.run_dir,
        "checkpoint": out.checkpoint,
        "steps": last.map(|m| m.step),
        "final_loss": last.map(|m| m.loss),
        "knn_curve": out.knn_curve,
    }));
    eprintln!("run directory: {}", out.run_dir.display());
    Ok(())
}

fn run_knn(a: &KnnArgs) -> Result<()> {
    let (state, splits) = a.ckpt.load()?;
    let kind: FeatureKind = a.features.parse()?;
    let r = pipeline::knn_eval(&state, &splits, &a.k, kind, a.ckpt.role()?)?;
    for (k, acc) in &r.per_k {
        emit(json!({"k": k, "accuracy": acc}));
    }
    emit(json!({"best_k": r.best_k, "best_accuracy": r.best_accuracy}));
    eprintln!("knn top-1 {:.2}% (k = {})", 100.0 * r.best_accuracy, r.best_k);
    Ok(())
}

fn input_kind(s: &str) -> Result<FeatureKind> {
    match s {
        "global" | "pooled" => Ok(FeatureKind::Pooled),
        "hypercolumn" | "hyper" => Ok(FeatureKind::Hypercolumn),
        _ => bail!("--input must be global or hypercolumn"),
    }
}

fn run_linear(a: &LinearArgs) -> Result<()> {
    let (state, splits) = a.ckpt.load()?;
    let recipe = LinearRecipe {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        weight_decay: a.weight_decay,
        normalize: !a.no_normalize,
        seed: state.cfg.seed,
        ..Default::default()
    };
    let r = pipeline::linear_eval(&state, &splits, input_kind(&a.input)?, a.ckpt.role()?, &recipe)?;
    emit(json!({"input": a.input, "top1": r.top1, "top5": r.top5}));
    eprintln!("linear top-1 {:.2}%", 100.0 * r.top1);
    Ok(())
}

fn run_semi(a: &SemiArgs) -> Result<()> {
    let (state, splits) = a.ckpt.load()?;
    let mut recipe = SemiRecipe::for_fraction(a.fraction);
    if let Some(e) = a.epochs {
        recipe = recipe.with_epochs(e);
    }
    if let Some(v) = a.head_lr {
        recipe.head_lr = v;
    }
    if let Some(v) = a.backbone_lr {
        recipe.backbone_lr = v;
    }
    if let Some(v) = a.batch_size {
        recipe.batch_size = v;
    }
    recipe.seed = state.cfg.seed;
    let (r, n) = pipeline::semi_eval(&state, &splits, a.fraction, a.ckpt.role()?, &recipe)?;
    emit(json!({"fraction": a.fraction, "labeled": n, "top1": r.top1, "top5": r.top5}));
    eprintln!("fine-tuned on {n} labeled images: top-1 {:.2}%", 100.0 * r.top1);
    Ok(())
}

fn run_pr(a: &PrArgs) -> Result<()> {
    let (state, splits) = a.ckpt.load()?;
    let context: PrContext = a.context.parse()?;
    let data = if a.val { &splits.val } else { &splits.train };
    let m = a.bank_samples.clamp(1, (data.len() / 2).max(1));
    let thresholds: Vec<f64> = if a.alphas == PR_ALPHAS {
        default_thresholds(m)
    } else {
        a.alphas.iter().map(|x| x / m as f64).collect()
    };
    let recs = pipeline::teacher_pr_analysis(&state, data, context, &thresholds, a.bank_samples)?;
    for r in &recs {
        emit(serde_json::to_value(r)?);
        eprintln!(
            "threshold {:.5}: precision {:.4} recall {:.4}{}",
            r.threshold,
            r.precision,
            r.recall,
            if r.zero_support { " (no predicted positives)" } else { "" }
        );
    }
    Ok(())
}

fn run_export(a: &ExportArgs) -> Result<()> {
    let (state, splits) = a.ckpt.load()?;
    let kind: FeatureKind = a.layer.parse()?;
    let data = match a.split.as_str() {
        "train" => &splits.train,
        "val" => &splits.val,
        _ => bail!("--split must be train or val"),
    };
    let (rows, dim) = pipeline::export_embeddings(&state, data, kind, a.ckpt.role()?, &a.out)?;
    emit(json!({"path": a.out, "rows": rows, "dim": dim, "layer": kind.as_str()}));
    eprintln!("wrote {rows} x {dim} embeddings to {}", a.out.display());
    Ok(())
}

fn run_ablate(a: &AblateArgs) -> Result<()> {
    let base = a.cfg.load()?;
    let field: AblationField = a.field.parse()?;
    let values = if a.values.is_empty() { field.default_values() } else { a.values.clone() };
    let splits = load_splits(&base)?;
    let rows = ablate(&base, field, &values, &splits, Path::new(&a.runs), a.parallel)?;
    for r in &rows {
        emit(serde_json::to_value(r)?);
    }
    eprint!("{}", format_table(field, &rows));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Pretrain(a) => run_pretrain(a),
        Command::KnnEval(a) => run_knn(a),
        Command::LinearEval(a) => run_linear(a),
        Command::SemiEval(a) => run_semi(a),
        Command::PrAnalysis(a) => run_pr(a),
        Command::ExportEmbeddings(a) => run_export(a),
        Command::Ablate(a) => run_ablate(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
