use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{CghError, Result};

/// Thresholds are `alpha / M` for each of these multipliers.
pub const PR_ALPHAS: [f64; 6] = [1.0, 2.0, 5.0, 10.0, 20.0, 50.0];

pub fn default_thresholds(bank_size: usize) -> Vec<f64> {
    PR_ALPHAS.iter().map(|a| a / bank_size as f64).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrCounts {
    pub true_positive: u64,
    pub predicted_positive: u64,
    pub actual_positive: u64,
}

impl PrCounts {
    /// `1.0` when nothing was predicted positive (see `zero_support`).
    pub fn precision(&self) -> f64 {
        if self.predicted_positive == 0 {
            1.0
        } else {
            self.true_positive as f64 / self.predicted_positive as f64
        }
    }

    /// `1.0` when there is nothing to recall.
    pub fn recall(&self) -> f64 {
        if self.actual_positive == 0 {
            1.0
        } else {
            self.true_positive as f64 / self.actual_positive as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrRecord {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    pub context: String,
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    #[serde(flatten)]
    pub counts: PrCounts,
    /// No entry passed the threshold, so precision is a convention.
    pub zero_support: bool,
}

/// Running precision/recall counts of thresholded teacher distributions.
///
/// Bank entry `i` is a predicted positive for a query when `p[i] > threshold`
/// and a true positive when it also shares the query's class. Entries with a
/// negative (unknown) label are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct PrAccumulator {
    thresholds: Vec<f64>,
    counts: Vec<PrCounts>,
}

impl PrAccumulator {
    pub fn new(thresholds: Vec<f64>) -> Self {
        let counts = vec![PrCounts::default(); thresholds.len()];
        Self { thresholds, counts }
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn counts(&self) -> &[PrCounts] {
        &self.counts
    }

    pub fn reset(&mut self) {
        self.counts.iter_mut().for_each(|c| *c = PrCounts::default());
    }

    pub fn add(&mut self, dist: ArrayView1<f64>, bank_labels: &[i64], query_label: i64) -> Result<()> {
        if dist.len() != bank_labels.len() {
            return Err(CghError::Shape("distribution and bank labels differ in length".into()));
        }
        for (t, c) in self.thresholds.iter().zip(self.counts.iter_mut()) {
            for (&p, &l) in dist.iter().zip(bank_labels) {
                if l < 0 {
                    continue;
                }
                let same = l == query_label;
                let pos = p > *t;
                c.actual_positive += same as u64;
                c.predicted_positive += pos as u64;
                c.true_positive += (same && pos) as u64;
            }
        }
        Ok(())
    }

    pub fn add_batch(&mut self, dists: ArrayView2<f64>, bank_labels: &[i64], query_labels: &[i64]) -> Result<()> {
        if dists.nrows() != query_labels.len() {
            return Err(CghError::Shape("one query label per distribution row required".into()));
        }
        for (row, &q) in dists.rows().into_iter().zip(query_labels) {
            self.add(row, bank_labels, q)?;
        }
        Ok(())
    }

    pub fn records(&self, epoch: Option<usize>, context: &str) -> Vec<PrRecord> {
        self.thresholds
            .iter()
            .zip(&self.counts)
            .map(|(&threshold, c)| PrRecord {
                epoch,
                context: context.to_string(),
                threshold,
                precision: c.precision(),
                recall: c.recall(),
                counts: *c,
                zero_support: c.predicted_positive == 0,
            })
            .collect()
    }
}

/// Precision/recall of teacher distributions `dists` (queries x bank) given
/// bank labels and query labels.
pub fn pr_from_teacher(
    dists: ArrayView2<f64>,
    bank_labels: Option<&[i64]>,
    query_labels: &[i64],
    thresholds: &[f64],
    epoch: Option<usize>,
    context: &str,
) -> Result<Vec<PrRecord>> {
    let labels = bank_labels.ok_or_else(|| CghError::Eval("bank carries no labels".into()))?;
    let mut acc = PrAccumulator::new(thresholds.to_vec());
    acc.add_batch(dists, labels, query_labels)?;
    Ok(acc.records(epoch, context))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn toy_bank_matches_hand_count() {
        let p = array![[0.30, 0.25, 0.20, 0.10, 0.10, 0.05]];
        let bank = [1, 1, 0, 1, 0, 1];
        let recs = pr_from_teacher(p.view(), Some(&bank), &[1], &[0.15, 0.0, 0.5], None, "global").unwrap();
        // > 0.15: entries 0,1,2 -> tp 2 of 3 predicted, 4 actual.
        assert_eq!(recs[0].counts, PrCounts { true_positive: 2, predicted_positive: 3, actual_positive: 4 });
        assert!((recs[0].precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(recs[0].recall, 0.5);
        assert_eq!(recs[1].recall, 1.0);
        assert!(recs[2].zero_support);
        assert_eq!(recs[2].precision, 1.0);
        assert_eq!(recs[2].recall, 0.0);
    }

    #[test]
    fn unlabeled_bank_is_an_error() {
        let p = array![[0.5, 0.5]];
        assert!(pr_from_teacher(p.view(), None, &[0], &[0.1], None, "global").is_err());
    }

    #[test]
    fn unknown_labels_are_skipped() {
        let mut acc = PrAccumulator::new(vec![0.0]);
        acc.add(array![0.5, 0.5].view(), &[-1, 2], 2).unwrap();
        assert_eq!(acc.counts()[0], PrCounts { true_positive: 1, predicted_positive: 1, actual_positive: 1 });
    }

    #[test]
    fn default_threshold_sweep() {
        assert_eq!(default_thresholds(100), vec![0.01, 0.02, 0.05, 0.1, 0.2, 0.5]);
    }
}
