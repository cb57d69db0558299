//! Relational distillation between global and hypercolumn contexts.
//!
//! Each context keeps a FIFO bank of past teacher embeddings. An embedding is
//! turned into a distribution over the bank by a temperature-scaled softmax of
//! cosine similarities. The student's distribution in one context is trained
//! to match the teacher's distribution in the other context:
//!
//! ```text
//! L_gh = CE(y_g1, y_h2)     y_g1 = softmax(sim(z_g1, Q)   / tau_s)
//!                           y_h2 = softmax(sim(z_h2, Q_h) / tau_h)
//! L_hg = CE(y_h1, y_g2)     y_h1 = softmax(sim(z_h1, Q_h) / tau_h)
//!                           y_g2 = softmax(sim(z_g2, Q)   / tau_t)
//! L    = L_gh + L_hg
//! ```
//!
//! Teacher distributions (`y_h2`, `y_g2`) are constants: no gradient flows
//! into the teacher embeddings.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{ContextVariant, TrainConfig};
use crate::error::{CghError, Result};
use crate::rng::Rng;

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(CghError::Shape(format!("vectors of length {} and {}", u.len(), v.len())));
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(CghError::ZeroVector);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

fn norm(u: &[f64]) -> f64 {
    u.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(CghError::Temperature(tau))
    }
}

/// Probability vector over the entries of a memory bank.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityDistribution(pub Vec<f64>);

impl SimilarityDistribution {
    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        self.0
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc })
            .0
    }

    pub fn entropy(&self) -> f64 {
        -self.0.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }
}

/// In-place max-subtracted softmax of `logits / tau`.
fn softmax_row(mut row: ndarray::ArrayViewMut1<f64>, tau: f64) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    row.mapv_inplace(|s| {
        let e = ((s - max) / tau).exp();
        sum += e;
        e
    });
    row.mapv_inplace(|e| e / sum);
}

// ---------------------------------------------------------------------------
// Memory bank

/// Fixed-capacity FIFO of unit-norm embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    entries: Array2<f64>,
    cursor: usize,
    labels: Option<Vec<i64>>,
}

impl MemoryBank {
    /// `capacity` i.i.d. Gaussian vectors, each L2-normalized.
    pub fn init(capacity: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(CghError::invalid("bank", "capacity and dim must be > 0"));
        }
        let mut entries: Array2<f64> = Array2::from_shape_simple_fn((capacity, dim), || StandardNormal.sample(rng));
        for mut row in entries.rows_mut() {
            let n = row.dot(&row).sqrt();
            row /= n;
        }
        Ok(Self { entries, cursor: 0, labels: None })
    }

    /// Restores a bank; every row must already be unit-norm.
    pub fn from_parts(entries: Array2<f64>, cursor: usize, labels: Option<Vec<i64>>) -> Result<Self> {
        if entries.nrows() == 0 || cursor >= entries.nrows() {
            return Err(CghError::Shape("bank cursor out of range".into()));
        }
        if labels.as_ref().is_some_and(|l| l.len() != entries.nrows()) {
            return Err(CghError::Shape("bank label count does not match capacity".into()));
        }
        for row in entries.rows() {
            if (row.dot(&row).sqrt() - 1.0).abs() > 1e-6 {
                return Err(CghError::invalid("bank", "entries must be unit-norm"));
            }
        }
        Ok(Self { entries, cursor, labels })
    }

    pub fn capacity(&self) -> usize {
        self.entries.nrows()
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn entries(&self) -> ArrayView2<'_, f64> {
        self.entries.view()
    }

    pub fn entry(&self, i: usize) -> ArrayView1<'_, f64> {
        self.entries.row(i)
    }

    /// Per-entry class labels (`-1` = unknown) when label tracking is on.
    pub fn labels(&self) -> Option<&[i64]> {
        self.labels.as_deref()
    }

    /// Starts tracking labels; existing entries are marked unknown.
    pub fn track_labels(&mut self) {
        if self.labels.is_none() {
            self.labels = Some(vec![-1; self.capacity()]);
        }
    }

    /// Overwrites the oldest `batch.nrows()` entries with the L2-normalized rows.
    pub fn enqueue(&mut self, batch: ArrayView2<f64>) -> Result<()> {
        self.enqueue_inner(batch, None)
    }

    pub fn enqueue_labeled(&mut self, batch: ArrayView2<f64>, labels: &[i64]) -> Result<()> {
        if labels.len() != batch.nrows() {
            return Err(CghError::Shape("one label per enqueued row required".into()));
        }
        self.track_labels();
        self.enqueue_inner(batch, Some(labels))
    }

    fn enqueue_inner(&mut self, batch: ArrayView2<f64>, labels: Option<&[i64]>) -> Result<()> {
        let m = self.capacity();
        if batch.nrows() > m {
            return Err(CghError::BatchTooLarge { batch: batch.nrows(), capacity: m });
        }
        if batch.ncols() != self.dim() {
            return Err(CghError::Shape(format!("bank dim {} vs batch dim {}", self.dim(), batch.ncols())));
        }
        let norms: Vec<f64> = batch.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        if norms.iter().any(|&n| !(n > 0.0 && n.is_finite())) {
            return Err(CghError::ZeroVector);
        }
        for (i, (row, n)) in batch.rows().into_iter().zip(norms).enumerate() {
            let slot = (self.cursor + i) % m;
            self.entries.row_mut(slot).assign(&(&row / n));
            if let Some(tracked) = self.labels.as_mut() {
                tracked[slot] = labels.map_or(-1, |l| l[i]);
            }
        }
        self.cursor = (self.cursor + batch.nrows()) % m;
        Ok(())
    }

    /// Cosine similarities of each (not necessarily normalized) row of `z`
    /// against every entry: `[B, M]`.
    pub fn similarities(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        let (zn, _) = normalize_rows(z)?;
        Ok(zn.dot(&self.entries.t()).mapv(|s| s.clamp(-1.0, 1.0)))
    }

    /// Row-wise similarity distributions at temperature `tau`: `[B, M]`.
    pub fn distributions(&self, z: ArrayView2<f64>, tau: f64) -> Result<Array2<f64>> {
        check_tau(tau)?;
        let mut s = self.similarities(z)?;
        for row in s.rows_mut() {
            softmax_row(row, tau);
        }
        Ok(s)
    }
}

fn normalize_rows(z: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms: Array1<f64> = z.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if norms.iter().any(|&n| !(n > 0.0 && n.is_finite())) {
        return Err(CghError::ZeroVector);
    }
    Ok((&z / &norms.view().insert_axis(Axis(1)), norms))
}

pub fn similarity_distribution(z: &[f64], bank: &MemoryBank, tau: f64) -> Result<SimilarityDistribution> {
    let z = ArrayView2::from_shape((1, z.len()), z).expect("row vector");
    if z.ncols() != bank.dim() {
        return Err(CghError::Shape(format!("embedding dim {} vs bank dim {}", z.ncols(), bank.dim())));
    }
    let d = bank.distributions(z, tau)?;
    Ok(SimilarityDistribution(d.row(0).to_vec()))
}

/// `-sum_k target[k] * ln pred[k]`.
pub fn cross_entropy(pred: &SimilarityDistribution, target: &SimilarityDistribution) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(CghError::Shape(format!("distributions of length {} and {}", pred.len(), target.len())));
    }
    let mut ce = 0.0;
    for (&p, &t) in pred.0.iter().zip(&target.0) {
        if t > 0.0 {
            if p <= 0.0 {
                return Err(CghError::Eval("prediction assigns zero mass to a target entry".into()));
            }
            ce -= t * p.ln();
        }
    }
    Ok(ce)
}

// ---------------------------------------------------------------------------
// Objective

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperatures {
    pub student: f64,
    pub teacher: f64,
    pub hyper: f64,
}

impl Temperatures {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self { student: cfg.tau_s, teacher: cfg.tau_t, hyper: cfg.tau_h }
    }

    fn check(&self) -> Result<()> {
        check_tau(self.student)?;
        check_tau(self.teacher)?;
        check_tau(self.hyper)
    }
}

/// Loss terms. For the cross variant `l_gh` / `l_hg` are the
/// global-hypercolumn and hypercolumn-global alignments. For the same
/// variant they hold the global-global and hypercolumn-hypercolumn terms;
/// for the global variant `l_gh` is the single global term and `l_hg = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_gh: f64,
    pub l_hg: f64,
    pub total: f64,
}

/// Batch of embeddings from one network role, one row per sample.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingBatch<'a> {
    pub global: ArrayView2<'a, f64>,
    pub hyper: Option<ArrayView2<'a, f64>>,
}

/// Mean batch loss, its gradients w.r.t. the student embeddings and the
/// teacher distributions that served as targets.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: LossBundle,
    pub grad_global: Array2<f64>,
    pub grad_hyper: Option<Array2<f64>>,
    /// `y_g2` (global-context teacher distribution), `[B, M]`.
    pub teacher_global: Array2<f64>,
    /// `y_h2` when the hypercolumn branch is active.
    pub teacher_hyper: Option<Array2<f64>>,
    pub max_similarity: f64,
}

/// One CE term with stop-gradient on the target, averaged over the batch.
/// Returns (mean loss, gradient w.r.t. the raw student rows, max |sim|).
fn ce_term(student: ArrayView2<f64>, bank: &MemoryBank, tau: f64, target: &Array2<f64>) -> Result<(f64, Array2<f64>, f64)> {
    let b = student.nrows() as f64;
    let (zn, norms) = normalize_rows(student)?;
    let sims = zn.dot(&bank.entries.t()).mapv(|s| s.clamp(-1.0, 1.0));
    let max_sim = sims.iter().fold(f64::NEG_INFINITY, |a, &s| a.max(s));
    let mut loss = 0.0;
    // dL/ds = (p - t) / tau; logsumexp form keeps ln p finite at low tau.
    let mut dlogits = Array2::zeros(sims.raw_dim());
    for ((srow, trow), mut drow) in sims.rows().into_iter().zip(target.rows()).zip(dlogits.rows_mut()) {
        let max = srow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let shifted = srow.mapv(|s| (s - max) / tau);
        let lse = shifted.mapv(f64::exp).sum().ln();
        for ((&sh, &t), d) in shifted.iter().zip(trow.iter()).zip(drow.iter_mut()) {
            let logp = sh - lse;
            if t > 0.0 {
                loss -= t * logp;
            }
            *d = (logp.exp() - t) / (tau * b);
        }
    }
    // d sim_i / d z = (q_i - sim_i * zhat) / |z|  (bank rows are unit norm)
    let dzhat = dlogits.dot(&bank.entries);
    let mut grad = dzhat;
    for ((mut g, zr), &n) in grad.rows_mut().into_iter().zip(zn.rows()).zip(norms.iter()) {
        let proj = g.dot(&zr);
        g.zip_mut_with(&zr, |gv, &zv| *gv = (*gv - proj * zv) / n);
    }
    Ok((loss / b, grad, max_sim))
}

fn require_hyper<'a>(e: &EmbeddingBatch<'a>, role: &str) -> Result<ArrayView2<'a, f64>> {
    e.hyper
        .ok_or_else(|| CghError::invalid("context", format!("{role} hypercolumn embeddings are required")))
}

/// Mean objective over a batch with analytic gradients.
pub fn cgh_loss_batch(
    student: EmbeddingBatch,
    teacher: EmbeddingBatch,
    bank: &MemoryBank,
    hyper_bank: Option<&MemoryBank>,
    temps: Temperatures,
    variant: ContextVariant,
) -> Result<BatchLoss> {
    temps.check()?;
    if student.global.nrows() != teacher.global.nrows() || student.global.nrows() == 0 {
        return Err(CghError::Shape("student and teacher batches must be nonempty and equal in size".into()));
    }
    let y_g2 = bank.distributions(teacher.global, temps.teacher)?;
    match variant {
        ContextVariant::Global => {
            let (l, g, ms) = ce_term(student.global, bank, temps.student, &y_g2)?;
            Ok(BatchLoss {
                loss: LossBundle { l_gh: l, l_hg: 0.0, total: l },
                grad_global: g,
                grad_hyper: None,
                teacher_global: y_g2,
                teacher_hyper: None,
                max_similarity: ms,
            })
        }
        ContextVariant::Cross | ContextVariant::Same => {
            let qh = hyper_bank.ok_or_else(|| CghError::invalid("context", "hypercolumn bank is required"))?;
            let s_h = require_hyper(&student, "student")?;
            let t_h = require_hyper(&teacher, "teacher")?;
            let y_h2 = qh.distributions(t_h, temps.hyper)?;
            let (global_target, hyper_target) = if variant == ContextVariant::Cross {
                (&y_h2, &y_g2)
            } else {
                (&y_g2, &y_h2)
            };
            // y_h2 indexes Q_h and y_g2 indexes Q; a cross target lines up
            // with the other bank slot-by-slot, so both banks share M.
            if qh.capacity() != bank.capacity() {
                return Err(CghError::Shape("global and hypercolumn banks must share a capacity".into()));
            }
            let (l1, g1, ms1) = ce_term(student.global, bank, temps.student, global_target)?;
            let (l2, g2, ms2) = ce_term(s_h, qh, temps.hyper, hyper_target)?;
            Ok(BatchLoss {
                loss: LossBundle { l_gh: l1, l_hg: l2, total: l1 + l2 },
                grad_global: g1,
                grad_hyper: Some(g2),
                teacher_global: y_g2,
                teacher_hyper: Some(y_h2),
                max_similarity: ms1.max(ms2),
            })
        }
    }
}

/// Single-sample embeddings.
#[derive(Debug, Clone, Copy)]
pub struct SampleEmbeddings<'a> {
    pub global: &'a [f64],
    pub hyper: Option<&'a [f64]>,
}

impl<'a> SampleEmbeddings<'a> {
    fn as_batch(&self) -> EmbeddingBatch<'a> {
        EmbeddingBatch {
            global: ArrayView2::from_shape((1, self.global.len()), self.global).expect("row"),
            hyper: self.hyper.map(|h| ArrayView2::from_shape((1, h.len()), h).expect("row")),
        }
    }
}

/// Gradients of the single-sample objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub z_g1: Vec<f64>,
    pub z_h1: Option<Vec<f64>>,
    /// Always zero: teacher distributions are stop-gradient targets.
    pub z_g2: Vec<f64>,
    pub z_h2: Option<Vec<f64>>,
}

pub fn cgh_loss(
    student: SampleEmbeddings,
    teacher: SampleEmbeddings,
    bank: &MemoryBank,
    hyper_bank: Option<&MemoryBank>,
    temps: Temperatures,
    variant: ContextVariant,
) -> Result<LossBundle> {
    cgh_loss_with_grad(student, teacher, bank, hyper_bank, temps, variant).map(|(l, _)| l)
}

pub fn cgh_loss_with_grad(
    student: SampleEmbeddings,
    teacher: SampleEmbeddings,
    bank: &MemoryBank,
    hyper_bank: Option<&MemoryBank>,
    temps: Temperatures,
    variant: ContextVariant,
) -> Result<(LossBundle, LossGradients)> {
    let out = cgh_loss_batch(student.as_batch(), teacher.as_batch(), bank, hyper_bank, temps, variant)?;
    let grads = LossGradients {
        z_g1: out.grad_global.row(0).to_vec(),
        z_h1: out.grad_hyper.as_ref().map(|g| g.row(0).to_vec()),
        z_g2: vec![0.0; teacher.global.len()],
        z_h2: teacher.hyper.map(|h| vec![0.0; h.len()]),
    };
    Ok((out.loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use ndarray::array;

    fn bank_from(rows: Array2<f64>) -> MemoryBank {
        MemoryBank::from_parts(rows, 0, None).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
        let c = cosine_similarity(&[1.0, 1.0, 0.0], &[1.0, 0.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((c - 0.70710678).abs() < 1e-8);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(CghError::ZeroVector)));
    }

    #[test]
    fn equal_entries_give_uniform_distribution() {
        let bank = bank_from(Array2::from_shape_fn((5, 3), |(_, j)| if j == 1 { 1.0 } else { 0.0 }));
        let d = similarity_distribution(&[0.3, -0.2, 0.9], &bank, 0.04).unwrap();
        for p in d.probs() {
            assert!((p - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn three_entry_softmax() {
        let bank = bank_from(array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]);
        let d = similarity_distribution(&[1.0, 0.0], &bank, 0.1).unwrap();
        let expect = [0.999954600070331, 4.5397868608866656e-05, 2.061060046209062e-09];
        for (p, e) in d.probs().iter().zip(expect) {
            assert!((p - e).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_temperature_is_rejected() {
        let bank = bank_from(array![[1.0, 0.0], [0.0, 1.0]]);
        assert!(matches!(similarity_distribution(&[1.0, 0.0], &bank, 0.0), Err(CghError::Temperature(_))));
        assert!(similarity_distribution(&[1.0, 0.0], &bank, -0.1).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = SimilarityDistribution(vec![0.25; 4]);
        let t = SimilarityDistribution(vec![0.1, 0.2, 0.3, 0.4]);
        assert!((cross_entropy(&uniform, &t).unwrap() - 1.3862943611198906).abs() < 1e-12);
        assert!((cross_entropy(&t, &t).unwrap() - t.entropy()).abs() < 1e-12);
        let pred = SimilarityDistribution(vec![0.7, 0.2, 0.1]);
        let target = SimilarityDistribution(vec![0.5, 0.3, 0.2]);
        assert!((cross_entropy(&pred, &target).unwrap() - 1.1216858642984056).abs() < 1e-12);
        let zero = SimilarityDistribution(vec![1.0, 0.0]);
        assert!(cross_entropy(&zero, &SimilarityDistribution(vec![0.5, 0.5])).is_err());
    }

    #[test]
    fn ring_buffer_trace() {
        let e = |i: usize| {
            let mut v = [0.0; 6];
            v[i] = 1.0;
            v
        };
        let mut bank = bank_from(Array2::from_shape_fn((4, 6), |(i, j)| if i == j { 1.0 } else { 0.0 }));
        let batch = |a: usize, b: usize| {
            Array2::from_shape_vec((2, 6), [e(a), e(b)].concat()).unwrap()
        };
        bank.enqueue(batch(0, 1).view()).unwrap(); // a, b
        bank.enqueue(batch(2, 3).view()).unwrap(); // c, d
        bank.enqueue(batch(4, 5).view()).unwrap(); // e, f
        let argmaxes: Vec<usize> = bank
            .entries()
            .rows()
            .into_iter()
            .map(|r| r.iter().position(|&v| v == 1.0).unwrap())
            .collect();
        assert_eq!(argmaxes, vec![4, 5, 2, 3]);
        assert_eq!(bank.cursor(), 2);
        let too_big = Array2::<f64>::ones((5, 6));
        assert!(matches!(bank.enqueue(too_big.view()), Err(CghError::BatchTooLarge { .. })));
    }

    #[test]
    fn full_enqueue_replaces_everything() {
        let mut rng = stream(1, Stream::BankInit, &[]);
        let mut bank = MemoryBank::init(8, 4, &mut rng).unwrap();
        let fresh = MemoryBank::init(8, 4, &mut rng).unwrap();
        bank.enqueue(fresh.entries()).unwrap();
        let diff = (&bank.entries() - &fresh.entries()).mapv(f64::abs);
        assert!(diff.iter().all(|&d| d < 1e-15));
    }

    #[test]
    fn init_is_unit_norm_and_reproducible() {
        let a = MemoryBank::init(32, 16, &mut stream(3, Stream::BankInit, &[])).unwrap();
        let b = MemoryBank::init(32, 16, &mut stream(3, Stream::BankInit, &[])).unwrap();
        assert_eq!(a, b);
        for r in a.entries().rows() {
            assert!((r.dot(&r).sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn labels_follow_entries() {
        let mut bank = MemoryBank::init(4, 2, &mut stream(0, Stream::BankInit, &[])).unwrap();
        bank.enqueue_labeled(array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]].view(), &[7, 8, 9]).unwrap();
        assert_eq!(bank.labels().unwrap(), &[7, 8, 9, -1]);
        bank.enqueue(array![[1.0, 0.0], [0.0, 2.0]].view()).unwrap();
        assert_eq!(bank.labels().unwrap(), &[-1, 8, 9, -1]);
        assert!((bank.entry(0)[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_construction_gives_equal_terms() {
        let mut rng = stream(5, Stream::BankInit, &[]);
        let q = MemoryBank::init(6, 4, &mut rng).unwrap();
        let zs = [0.3, -0.1, 0.8, 0.2];
        let zt = [0.1, 0.4, -0.3, 0.5];
        let s = SampleEmbeddings { global: &zs, hyper: Some(&zs) };
        let t = SampleEmbeddings { global: &zt, hyper: Some(&zt) };
        let tau = Temperatures { student: 0.07, teacher: 0.07, hyper: 0.07 };
        let l = cgh_loss(s, t, &q, Some(&q), tau, ContextVariant::Cross).unwrap();
        assert!((l.l_gh - l.l_hg).abs() < 1e-14);
        assert!((l.total - 2.0 * l.l_gh).abs() < 1e-14);
    }

    #[test]
    fn missing_hyper_inputs_are_errors() {
        let q = MemoryBank::init(4, 2, &mut stream(0, Stream::BankInit, &[])).unwrap();
        let z = [1.0, 0.5];
        let s = SampleEmbeddings { global: &z, hyper: None };
        let tau = Temperatures { student: 0.1, teacher: 0.04, hyper: 0.08 };
        assert!(cgh_loss(s, s, &q, Some(&q), tau, ContextVariant::Cross).is_err());
        assert!(cgh_loss(s, s, &q, None, tau, ContextVariant::Global).is_ok());
        let bad = Temperatures { hyper: 0.0, ..tau };
        assert!(matches!(cgh_loss(s, s, &q, None, bad, ContextVariant::Global), Err(CghError::Temperature(_))));
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let mut rng = stream(9, Stream::BankInit, &[]);
        let q = MemoryBank::init(7, 5, &mut rng).unwrap();
        let qh = MemoryBank::init(7, 3, &mut rng).unwrap();
        let sg = Array2::from_shape_fn((3, 5), |(i, j)| ((i * 5 + j) as f64 * 0.37).sin());
        let sh = Array2::from_shape_fn((3, 3), |(i, j)| ((i * 3 + j) as f64 * 0.91).cos());
        let tg = Array2::from_shape_fn((3, 5), |(i, j)| ((i + 2 * j) as f64 * 0.53).cos());
        let th = Array2::from_shape_fn((3, 3), |(i, j)| ((2 * i + j) as f64 * 0.29).sin() + 0.1);
        let tau = Temperatures { student: 0.1, teacher: 0.04, hyper: 0.08 };
        for variant in ContextVariant::ALL {
            let run = |g: &Array2<f64>, h: &Array2<f64>| {
                cgh_loss_batch(
                    EmbeddingBatch { global: g.view(), hyper: Some(h.view()) },
                    EmbeddingBatch { global: tg.view(), hyper: Some(th.view()) },
                    &q,
                    Some(&qh),
                    tau,
                    *variant,
                )
                .unwrap()
            };
            let base = run(&sg, &sh);
            let eps = 1e-6;
            for idx in [(0, 0), (1, 3), (2, 4)] {
                let (mut p, mut m) = (sg.clone(), sg.clone());
                p[idx] += eps;
                m[idx] -= eps;
                let fd = (run(&p, &sh).loss.total - run(&m, &sh).loss.total) / (2.0 * eps);
                assert!((fd - base.grad_global[idx]).abs() < 1e-6, "{variant} global {idx:?}");
            }
            if let Some(gh) = &base.grad_hyper {
                for idx in [(0, 1), (2, 2)] {
                    let (mut p, mut m) = (sh.clone(), sh.clone());
                    p[idx] += eps;
                    m[idx] -= eps;
                    let fd = (run(&sg, &p).loss.total - run(&sg, &m).loss.total) / (2.0 * eps);
                    assert!((fd - gh[idx]).abs() < 1e-6, "{variant} hyper {idx:?}");
                }
            }
        }
    }
}
