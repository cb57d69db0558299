//! Checkpoint-level evaluation entry points shared by the CLI and bindings.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Axis};

use crate::config::ContextVariant;
use crate::data::{Dataset, Splits};
use crate::distill::MemoryBank;
use crate::error::{CghError, Result};
use crate::eval::{
    extract_features, knn_classify, linear_probe, pr_from_teacher, semi_supervised_finetune, write_embeddings,
    FeatureKind, KnnReport, LinearRecipe, ProbeReport, PrRecord, SemiRecipe, Voting,
};
use crate::model::{Stats, Weights};
use crate::train::TrainState;

/// Which copy of the encoder an evaluation reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Role {
    #[default]
    Student,
    Teacher,
}

impl FromStr for Role {
    type Err = CghError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "student" => Ok(Role::Student),
            "teacher" => Ok(Role::Teacher),
            _ => Err(CghError::invalid("role", "must be student or teacher")),
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Student => "student",
            Role::Teacher => "teacher",
        })
    }
}

/// Context whose teacher distribution is analysed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrContext {
    Global,
    Hypercolumn,
}

impl FromStr for PrContext {
    type Err = CghError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(PrContext::Global),
            "hypercolumn" | "hyper" => Ok(PrContext::Hypercolumn),
            _ => Err(CghError::invalid("context", "must be global or hypercolumn")),
        }
    }
}

fn weights(state: &TrainState, role: Role) -> &Weights {
    match role {
        Role::Student => &state.model.student,
        Role::Teacher => &state.model.teacher,
    }
}

pub fn features(state: &TrainState, data: &Dataset, kind: FeatureKind, role: Role) -> Result<ndarray::Array2<f32>> {
    let (mean, std) = state.cfg.mean_std();
    extract_features(&state.model.net, weights(state, role), data, kind, mean, std, state.cfg.batch_size.min(256))
}

/// KNN on pooled backbone features; k values above the train size are skipped.
pub fn knn_eval(state: &TrainState, splits: &Splits, ks: &[usize], kind: FeatureKind, role: Role) -> Result<KnnReport> {
    if splits.train.is_empty() || splits.val.is_empty() {
        return Err(CghError::Eval("knn needs nonempty train and val splits".into()));
    }
    let usable: Vec<usize> = ks.iter().copied().filter(|&k| k >= 1 && k <= splits.train.len()).collect();
    if usable.is_empty() {
        return Err(CghError::Eval(format!("no k in {ks:?} fits a train split of {}", splits.train.len())));
    }
    let ft = features(state, &splits.train, kind, role)?;
    let fv = features(state, &splits.val, kind, role)?;
    knn_classify(ft.view(), &splits.train.labels, fv.view(), &splits.val.labels, splits.train.num_classes, &usable, Voting::default())
}

pub fn linear_eval(state: &TrainState, splits: &Splits, kind: FeatureKind, role: Role, recipe: &LinearRecipe) -> Result<ProbeReport> {
    if splits.train.num_classes != splits.val.num_classes {
        return Err(CghError::Eval("train and val label spaces differ".into()));
    }
    let ft = features(state, &splits.train, kind, role)?;
    let fv = features(state, &splits.val, kind, role)?;
    linear_probe(ft.view(), &splits.train.labels, fv.view(), &splits.val.labels, splits.train.num_classes, recipe)
}

/// Returns the report and the number of labeled images used.
pub fn semi_eval(state: &TrainState, splits: &Splits, fraction: f64, role: Role, recipe: &SemiRecipe) -> Result<(ProbeReport, usize)> {
    let w = weights(state, role).clone();
    let (r, _, n) = semi_supervised_finetune(&state.cfg, &state.model.net, w, &splits.train, &splits.val, fraction, recipe)?;
    Ok((r, n))
}

/// Teacher precision/recall on a labeled set.
///
/// The first `bank_samples` images (capped at half the set) fill a labeled
/// bank with teacher embeddings; the rest are queries. Distributions use
/// `tau_t` for the global context and `tau_h` for the hypercolumn context.
pub fn teacher_pr_analysis(
    state: &TrainState,
    data: &Dataset,
    context: PrContext,
    thresholds: &[f64],
    bank_samples: usize,
) -> Result<Vec<PrRecord>> {
    if data.len() < 2 {
        return Err(CghError::Eval("precision/recall analysis needs at least two labeled images".into()));
    }
    if context == PrContext::Hypercolumn && state.cfg.context == ContextVariant::Global {
        return Err(CghError::Eval("global-variant checkpoints have no hypercolumn teacher".into()));
    }
    let kind = match context {
        PrContext::Global => FeatureKind::Projected,
        PrContext::Hypercolumn => FeatureKind::ProjectedHyper,
    };
    let tau = match context {
        PrContext::Global => state.cfg.tau_t,
        PrContext::Hypercolumn => state.cfg.tau_h,
    };
    let (mean, std) = state.cfg.mean_std();
    let net = &state.model.net;
    let z = extract_features(net, &state.model.teacher, data, kind, mean, std, state.cfg.batch_size.min(256))?.mapv(f64::from);
    let m = bank_samples.clamp(1, data.len() / 2);
    let bank_labels: Vec<i64> = data.labels[..m].iter().map(|&l| l as i64).collect();
    let bank = MemoryBank::from_parts(z.slice(s![..m, ..]).to_owned(), 0, Some(bank_labels))?;
    let queries = z.slice(s![m.., ..]);
    let dists = bank.distributions(queries, tau)?;
    let qlabels: Vec<i64> = data.labels[m..].iter().map(|&l| l as i64).collect();
    let name = match context {
        PrContext::Global => "global",
        PrContext::Hypercolumn => "hypercolumn",
    };
    pr_from_teacher(dists.view(), bank.labels(), &qlabels, thresholds, None, name)
}

/// Writes `(index, label, vector)` rows; returns (rows, dim).
pub fn export_embeddings(state: &TrainState, data: &Dataset, kind: FeatureKind, role: Role, path: &Path) -> Result<(usize, usize)> {
    let f = features(state, data, kind, role)?;
    let ids: Vec<u64> = (0..data.len() as u64).collect();
    let labels: Vec<i64> = data.labels.iter().map(|&l| l as i64).collect();
    write_embeddings(path, &ids, &labels, f.view())?;
    Ok((f.len_of(Axis(0)), f.ncols()))
}

/// Teacher-mode forward check used by smoke tests: all embeddings unit-norm.
pub fn embeddings_are_unit_norm(state: &TrainState, data: &Dataset) -> Result<bool> {
    let (mean, std) = state.cfg.mean_std();
    let views = data
        .images
        .iter()
        .map(|im| crate::augment::eval_view(im, state.model.net.image_size, mean, std))
        .collect::<Result<Vec<_>>>()?;
    let x = crate::nn::FeatureMap::from_views(&views.iter().collect::<Vec<_>>());
    let e = state.model.net.embed(&state.model.teacher, &x, Stats::Running)?;
    let ok = |a: &ndarray::Array2<f32>| a.rows().into_iter().all(|r| (r.dot(&r).sqrt() - 1.0).abs() < 1e-5);
    Ok(ok(&e.global) && e.hyper.as_ref().is_none_or(ok))
}
