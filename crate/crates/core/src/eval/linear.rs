use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{CghError, Result};
use crate::optim::cosine_lr;
use crate::rng::{stream, Stream};

/// Linear-probe schedule: SGD with momentum and cosine decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearRecipe {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    /// L2-normalize features before the classifier.
    pub normalize: bool,
    pub seed: u64,
}

impl Default for LinearRecipe {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            lr: 3.0,
            weight_decay: 0.0,
            momentum: 0.9,
            normalize: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeReport {
    pub top1: f64,
    /// Only reported with at least five classes.
    pub top5: Option<f64>,
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = logits.nrows() as f64;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (mut row, &y) in grad.rows_mut().into_iter().zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
        loss -= row[y].max(f64::MIN_POSITIVE).ln();
        row[y] -= 1.0;
        row /= n;
    }
    (loss / n, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub normalize: bool,
}

fn prepare(x: ArrayView2<f32>, normalize: bool) -> Array2<f64> {
    let mut out = x.mapv(f64::from);
    if normalize {
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row /= n;
            }
        }
    }
    out
}

impl LinearClassifier {
    pub fn logits(&self, x: ArrayView2<f32>) -> Array2<f64> {
        prepare(x, self.normalize).dot(&self.weight.t()) + &self.bias.view().insert_axis(Axis(0))
    }

    pub fn evaluate(&self, x: ArrayView2<f32>, labels: &[usize]) -> ProbeReport {
        topk_report(&self.logits(x), labels)
    }

    pub fn fit(x: ArrayView2<f32>, labels: &[usize], num_classes: usize, recipe: &LinearRecipe) -> Result<Self> {
        if x.nrows() == 0 || x.nrows() != labels.len() {
            return Err(CghError::Eval("linear probe needs one label per feature row".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(CghError::Eval(format!("label {bad} out of range for {num_classes} classes")));
        }
        let feats = prepare(x, recipe.normalize);
        let d = feats.ncols();
        let mut clf = Self { weight: Array2::zeros((num_classes, d)), bias: Array1::zeros(num_classes), normalize: recipe.normalize };
        let mut vw = Array2::<f64>::zeros((num_classes, d));
        let mut vb = Array1::<f64>::zeros(num_classes);
        let bs = recipe.batch_size.max(1);
        let per_epoch = x.nrows().div_ceil(bs);
        let total = recipe.epochs * per_epoch;
        let mut order: Vec<usize> = (0..x.nrows()).collect();
        let mut step = 0;
        for epoch in 0..recipe.epochs {
            order.shuffle(&mut stream(recipe.seed, Stream::Probe, &[epoch as u64]));
            for idx in order.chunks(bs) {
                let xb = feats.select(Axis(0), idx);
                let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                let logits = xb.dot(&clf.weight.t()) + &clf.bias.view().insert_axis(Axis(0));
                let (_, dl) = softmax_cross_entropy(&logits, &yb);
                let gw = dl.t().dot(&xb) + &(&clf.weight * recipe.weight_decay);
                let gb = dl.sum_axis(Axis(0));
                let lr = cosine_lr(recipe.lr, step, total, 0);
                vw = vw * recipe.momentum + gw;
                vb = vb * recipe.momentum + gb;
                clf.weight.scaled_add(-lr, &vw);
                clf.bias.scaled_add(-lr, &vb);
                step += 1;
            }
        }
        Ok(clf)
    }
}

pub(crate) fn topk_report(logits: &Array2<f64>, labels: &[usize]) -> ProbeReport {
    let n = labels.len().max(1) as f64;
    let classes = logits.ncols();
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        let target = row[y];
        // Rank = number of classes scoring strictly higher, ties favour lower ids.
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(c, &v)| v > target || (v == target && c < y))
            .count();
        top1 += (rank == 0) as usize;
        top5 += (rank < 5) as usize;
    }
    ProbeReport {
        top1: top1 as f64 / n,
        top5: (classes >= 5).then_some(top5 as f64 / n),
    }
}

/// Trains on `train`, reports accuracy on `val`.
pub fn linear_probe(
    train: ArrayView2<f32>,
    train_labels: &[usize],
    val: ArrayView2<f32>,
    val_labels: &[usize],
    num_classes: usize,
    recipe: &LinearRecipe,
) -> Result<ProbeReport> {
    if val.nrows() == 0 || val.nrows() != val_labels.len() {
        return Err(CghError::Eval("validation features and labels disagree".into()));
    }
    let clf = LinearClassifier::fit(train, train_labels, num_classes, recipe)?;
    Ok(clf.evaluate(val, val_labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_features_are_perfectly_separable() {
        let x = Array2::from_shape_fn((30, 6), |(i, j)| (i % 6 == j) as u8 as f32);
        let y: Vec<usize> = (0..30).map(|i| i % 6).collect();
        let recipe = LinearRecipe { epochs: 20, batch_size: 8, ..Default::default() };
        let r = linear_probe(x.view(), &y, x.view(), &y, 6, &recipe).unwrap();
        assert_eq!(r.top1, 1.0);
        assert_eq!(r.top5, Some(1.0));
    }

    #[test]
    fn cross_entropy_gradient_matches_differences() {
        let logits = ndarray::array![[0.3, -1.2, 2.0], [0.0, 0.5, -0.5]];
        let labels = [2, 1];
        let (_, g) = softmax_cross_entropy(&logits, &labels);
        let eps = 1e-6;
        for idx in [(0, 0), (1, 1), (1, 2)] {
            let (mut p, mut m) = (logits.clone(), logits.clone());
            p[idx] += eps;
            m[idx] -= eps;
            let fd = (softmax_cross_entropy(&p, &labels).0 - softmax_cross_entropy(&m, &labels).0) / (2.0 * eps);
            assert!((fd - g[idx]).abs() < 1e-8);
        }
    }

    #[test]
    fn top5_only_with_enough_classes() {
        let logits = ndarray::array![[1.0, 0.0, 0.5]];
        let r = topk_report(&logits, &[2]);
        assert_eq!(r.top1, 0.0);
        assert_eq!(r.top5, None);
    }

    #[test]
    fn recipe_defaults() {
        let r = LinearRecipe::default();
        assert_eq!((r.epochs, r.batch_size, r.lr, r.weight_decay, r.momentum), (100, 256, 3.0, 0.0, 0.9));
    }
}
