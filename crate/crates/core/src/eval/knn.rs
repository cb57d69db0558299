use ndarray::{ArrayView2, Axis};
use serde::Serialize;

use crate::error::{CghError, Result};

/// Neighbour counts swept by default; the best accuracy is reported.
pub const DEFAULT_KS: [usize; 4] = [10, 20, 100, 200];

/// Temperature of the similarity-weighted vote.
pub const KNN_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Voting {
    /// One vote per neighbour.
    Majority,
    /// Neighbour `j` votes `exp(sim_j / tau)`.
    Weighted { tau: f64 },
}

impl Default for Voting {
    fn default() -> Self {
        Voting::Weighted { tau: KNN_TEMPERATURE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KnnReport {
    pub per_k: Vec<(usize, f64)>,
    pub best_k: usize,
    pub best_accuracy: f64,
}

fn normalized(x: ArrayView2<f32>) -> Result<ndarray::Array2<f32>> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(CghError::ZeroVector);
        }
        row /= n;
    }
    Ok(out)
}

/// Cosine KNN classification of `val` against `train`, one accuracy per k.
///
/// Neighbours are ranked by similarity with ties broken by the lower train
/// index; class-score ties go to the lower class id.
pub fn knn_classify(
    train: ArrayView2<f32>,
    train_labels: &[usize],
    val: ArrayView2<f32>,
    val_labels: &[usize],
    num_classes: usize,
    ks: &[usize],
    voting: Voting,
) -> Result<KnnReport> {
    if train.nrows() == 0 || val.nrows() == 0 {
        return Err(CghError::Eval("knn needs nonempty train and val splits".into()));
    }
    if train.nrows() != train_labels.len() || val.nrows() != val_labels.len() || train.ncols() != val.ncols() {
        return Err(CghError::Shape("knn features and labels disagree".into()));
    }
    if ks.is_empty() || ks.iter().any(|&k| k == 0 || k > train.nrows()) {
        return Err(CghError::Eval(format!("every k must lie in 1..={}", train.nrows())));
    }
    let kmax = *ks.iter().max().unwrap();
    let tn = normalized(train)?;
    let vn = normalized(val)?;
    let mut correct = vec![0usize; ks.len()];
    const CHUNK: usize = 256;
    for (ci, vchunk) in vn.axis_chunks_iter(Axis(0), CHUNK).enumerate() {
        let sims = vchunk.dot(&tn.t());
        for (r, row) in sims.rows().into_iter().enumerate() {
            let mut order: Vec<usize> = (0..row.len()).collect();
            let cmp = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
            if kmax < order.len() {
                order.select_nth_unstable_by(kmax - 1, cmp);
                order.truncate(kmax);
            }
            order.sort_unstable_by(cmp);
            let truth = val_labels[ci * CHUNK + r];
            for (slot, &k) in ks.iter().enumerate() {
                let mut score = vec![0.0f64; num_classes];
                for &j in &order[..k] {
                    let vote = match voting {
                        Voting::Majority => 1.0,
                        Voting::Weighted { tau } => (row[j] as f64 / tau).exp(),
                    };
                    score[train_labels[j]] += vote;
                }
                let pred = score
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (c, &s)| if s > acc.1 { (c, s) } else { acc })
                    .0;
                if pred == truth {
                    correct[slot] += 1;
                }
            }
        }
    }
    let per_k: Vec<(usize, f64)> = ks
        .iter()
        .zip(&correct)
        .map(|(&k, &c)| (k, c as f64 / val.nrows() as f64))
        .collect();
    let (best_k, best_accuracy) = per_k
        .iter()
        .copied()
        .fold((0, f64::NEG_INFINITY), |acc, (k, a)| if a > acc.1 { (k, a) } else { acc });
    Ok(KnnReport { per_k, best_k, best_accuracy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn duplicate_point_is_found_with_k1() {
        let train = array![[1.0f32, 0.0], [0.0, 1.0], [-1.0, 0.2]];
        let val = array![[0.0f32, 1.0]];
        let r = knn_classify(train.view(), &[0, 1, 2], val.view(), &[1], 3, &[1], Voting::Majority).unwrap();
        assert_eq!(r.best_accuracy, 1.0);
    }

    #[test]
    fn separated_blobs_are_perfect() {
        let train = Array2::from_shape_fn((20, 2), |(i, j)| {
            let base = if i < 10 { [1.0, 0.1] } else { [-1.0, 0.1] };
            base[j] + 0.01 * i as f32
        });
        let labels: Vec<usize> = (0..20).map(|i| i / 10).collect();
        let val = array![[2.0f32, 0.0], [-3.0, 0.5]];
        let r = knn_classify(train.view(), &labels, val.view(), &[0, 1], 2, &[1, 5, 10], Voting::default()).unwrap();
        assert!(r.per_k.iter().all(|&(_, a)| a == 1.0));
    }

    #[test]
    fn bad_k_and_empty_inputs() {
        let train = array![[1.0f32, 0.0]];
        let r = knn_classify(train.view(), &[0], train.view(), &[0], 1, &[2], Voting::Majority);
        assert!(r.is_err());
        let empty = Array2::<f32>::zeros((0, 2));
        assert!(knn_classify(empty.view(), &[], train.view(), &[0], 1, &[1], Voting::Majority).is_err());
    }
}
