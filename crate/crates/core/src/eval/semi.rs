use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_weak, AugmentSpec};
use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{CghError, Result};
use crate::eval::extract_features;
use crate::eval::features::FeatureKind;
use crate::eval::linear::{softmax_cross_entropy, topk_report, ProbeReport};
use crate::model::{Network, Weights};
use crate::nn::{FeatureMap, Linear, ParamStore};
use crate::optim::Sgd;
use crate::rng::{stream, Stream};

/// Fine-tuning schedule with separate head and backbone learning rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemiRecipe {
    pub epochs: usize,
    pub batch_size: usize,
    pub head_lr: f64,
    pub backbone_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs at which both learning rates are multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub seed: u64,
}

impl SemiRecipe {
    fn base(head_lr: f64, backbone_lr: f64) -> Self {
        Self {
            epochs: 50,
            batch_size: 256,
            head_lr,
            backbone_lr,
            momentum: 0.9,
            weight_decay: 0.0,
            milestones: vec![30, 40],
            gamma: 0.1,
            seed: 0,
        }
    }

    pub fn one_percent() -> Self {
        Self::base(0.5, 1e-4)
    }

    pub fn ten_percent() -> Self {
        Self::base(0.2, 2e-4)
    }

    /// The 1% recipe below 5% labels, the 10% recipe otherwise.
    pub fn for_fraction(fraction: f64) -> Self {
        if fraction < 0.05 {
            Self::one_percent()
        } else {
            Self::ten_percent()
        }
    }

    /// Same recipe over `epochs`, milestones kept at 60% and 80%.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.milestones = vec![epochs * 3 / 5, epochs * 4 / 5];
        self.epochs = epochs;
        self
    }

    fn factor(&self, epoch: usize) -> f64 {
        self.gamma.powi(self.milestones.iter().filter(|&&m| epoch >= m).count() as i32)
    }
}

/// Class-balanced random subset holding `fraction` of each class (at least one).
pub fn labeled_subset(data: &Dataset, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CghError::invalid("fraction", "must lie in (0, 1]"));
    }
    let mut chosen = Vec::new();
    for class in 0..data.num_classes {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == class).collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut stream(seed, Stream::Dataset, &[class as u64, 7]));
        let take = ((idx.len() as f64 * fraction).round() as usize).clamp(1, idx.len());
        chosen.extend_from_slice(&idx[..take]);
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Fine-tunes the encoder plus a fresh linear head on the labeled subset,
/// then reports top-1/top-5 on `val`. `weights` is consumed and returned
/// updated.
#[allow(clippy::too_many_arguments)]
pub fn semi_supervised_finetune(
    cfg: &TrainConfig,
    net: &Network,
    mut weights: Weights,
    train: &Dataset,
    val: &Dataset,
    fraction: f64,
    recipe: &SemiRecipe,
) -> Result<(ProbeReport, Weights, usize)> {
    let subset = labeled_subset(train, fraction, recipe.seed)?;
    if val.is_empty() {
        return Err(CghError::Eval("validation split is empty".into()));
    }
    let spec = AugmentSpec::weak(cfg);
    let (mean, std) = cfg.mean_std();
    let mut head_store = ParamStore::new();
    let head = Linear::new(&mut head_store, "head", net.global_dim(), train.num_classes, &mut stream(recipe.seed, Stream::ModelInit, &[99]));
    let mut opt_b = Sgd::new(&weights.params, recipe.momentum, recipe.weight_decay);
    let mut opt_h = Sgd::new(&head_store, recipe.momentum, recipe.weight_decay);
    let mut grads_b = weights.params.zeros_like();
    let mut grads_h = head_store.zeros_like();
    let mut order = subset.clone();
    let bs = recipe.batch_size.max(1);
    for epoch in 0..recipe.epochs {
        let f = recipe.factor(epoch);
        order.shuffle(&mut stream(recipe.seed, Stream::EpochOrder, &[epoch as u64, 1]));
        for idx in order.chunks(bs) {
            if idx.len() < 2 {
                continue; // batch norm needs more than one sample
            }
            let views = idx
                .iter()
                .map(|&i| augment_weak(&train.images[i], &spec, &mut stream(recipe.seed, Stream::WeakView, &[epoch as u64, i as u64, 1])))
                .collect::<Result<Vec<_>>>()?;
            let x = FeatureMap::from_views(&views.iter().collect::<Vec<_>>());
            let (ctx, cache) = net.encode_train(&mut weights, &x, false)?;
            let logits = head.forward(&head_store, &ctx.global);
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let (loss, dl) = softmax_cross_entropy(&logits.mapv(f64::from), &labels);
            if !loss.is_finite() {
                return Err(CghError::Eval(format!("fine-tuning loss diverged at epoch {epoch}")));
            }
            grads_b.fill_zero();
            grads_h.fill_zero();
            let dx = head
                .backward(&head_store, &ctx.global, &dl.mapv(|v| v as f32), &mut grads_h, true)
                .expect("dx requested");
            net.encoder_backward(&weights, &cache, Some(&dx), None, &mut grads_b);
            opt_h.step(&mut head_store, &grads_h, recipe.head_lr * f)?;
            opt_b.step(&mut weights.params, &grads_b, recipe.backbone_lr * f)?;
        }
    }
    let feats = extract_features(net, &weights, val, FeatureKind::Pooled, mean, std, bs)?;
    let logits: Array2<f64> = head.forward(&head_store, &feats).mapv(f64::from);
    Ok((topk_report(&logits, &val.labels), weights, subset.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic;

    #[test]
    fn recipes() {
        let a = SemiRecipe::one_percent();
        assert_eq!((a.head_lr, a.backbone_lr, a.epochs), (0.5, 1e-4, 50));
        let b = SemiRecipe::ten_percent();
        assert_eq!((b.head_lr, b.backbone_lr), (0.2, 2e-4));
        assert_eq!(b.milestones, vec![30, 40]);
        assert_eq!(b.factor(29), 1.0);
        assert!((b.factor(30) - 0.1).abs() < 1e-15);
        assert!((b.factor(45) - 0.01).abs() < 1e-15);
        assert_eq!(SemiRecipe::ten_percent().with_epochs(50).milestones, vec![30, 40]);
    }

    #[test]
    fn subset_is_balanced_and_validated() {
        let d = synthetic(4, 10, 8, 0, 0);
        let s = labeled_subset(&d, 0.1, 3).unwrap();
        assert_eq!(s.len(), 4);
        let mut classes: Vec<usize> = s.iter().map(|&i| d.labels[i]).collect();
        classes.sort();
        assert_eq!(classes, vec![0, 1, 2, 3]);
        assert_eq!(labeled_subset(&d, 1.0, 0).unwrap().len(), 40);
        assert!(labeled_subset(&d, 0.0, 0).is_err());
        assert!(labeled_subset(&d, 1.5, 0).is_err());
    }
}
