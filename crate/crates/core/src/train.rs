//! Pretraining: one student backward per step, EMA teacher, FIFO banks.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{make_pair, AugmentSpec};
use crate::checkpoint::{Archive, ArrayData};
use crate::config::{ContextVariant, TrainConfig};
use crate::data::{Dataset, Splits};
use crate::distill::{cgh_loss_batch, EmbeddingBatch, MemoryBank, Temperatures};
use crate::ema::ema_update;
use crate::error::{CghError, Result};
use crate::eval::{default_thresholds, extract_features, knn_classify, FeatureKind, PrAccumulator, PrRecord, Voting};
use crate::model::{ModelState, Stats};
use crate::nn::{FeatureMap, ParamStore};
use crate::optim::{cosine_lr, Sgd};
use crate::rng::{stream, Stream};
use crate::run::RunDir;

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    #[serde(rename = "L")]
    pub loss: f64,
    #[serde(rename = "L_gh")]
    pub l_gh: f64,
    #[serde(rename = "L_hg")]
    pub l_hg: f64,
    pub lr: f64,
    pub step_time_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knn_acc: Option<f64>,
}

impl StepMetrics {
    /// Equality ignoring wall-clock time.
    pub fn same_values(&self, other: &StepMetrics) -> bool {
        self.step == other.step
            && self.epoch == other.epoch
            && self.loss.to_bits() == other.loss.to_bits()
            && self.l_gh.to_bits() == other.l_gh.to_bits()
            && self.l_hg.to_bits() == other.l_hg.to_bits()
            && self.lr.to_bits() == other.lr.to_bits()
            && self.knn_acc.map(f64::to_bits) == other.knn_acc.map(f64::to_bits)
    }
}

/// What the teacher saw during a step, before the banks were updated.
pub struct StepObservation<'a> {
    pub teacher_global: ArrayView2<'a, f64>,
    pub teacher_hyper: Option<ArrayView2<'a, f64>>,
    pub bank_labels: Option<&'a [i64]>,
    pub hyper_bank_labels: Option<&'a [i64]>,
    pub labels: &'a [i64],
}

/// Everything a run needs to continue bit-exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub cfg: TrainConfig,
    pub model: ModelState,
    pub opt: Sgd,
    pub pred_opt: Sgd,
    pub bank: MemoryBank,
    pub hyper_bank: Option<MemoryBank>,
    /// Optimizer steps taken.
    pub step: usize,
    /// Completed epochs.
    pub epoch: usize,
    grads: ParamStore,
    pred_grads: ParamStore,
    weak: AugmentSpec,
    contrastive: AugmentSpec,
}

fn to_f64(a: &Array2<f32>) -> Array2<f64> {
    a.mapv(f64::from)
}

fn row_norm_range(a: ArrayView2<f32>) -> (f64, f64) {
    a.rows().into_iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
        let n = (r.dot(&r) as f64).sqrt();
        (lo.min(n), hi.max(n))
    })
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = ModelState::new(cfg);
        let mut rng = stream(cfg.seed, Stream::BankInit, &[]);
        let mut bank = MemoryBank::init(cfg.bank_size, cfg.embed_dim, &mut rng)?;
        let mut hyper_bank = cfg
            .uses_hypercolumn()
            .then(|| MemoryBank::init(cfg.bank_size, cfg.embed_dim, &mut rng))
            .transpose()?;
        if cfg.monitor.pr_analysis {
            bank.track_labels();
            if let Some(h) = hyper_bank.as_mut() {
                h.track_labels();
            }
        }
        Ok(Self {
            opt: Sgd::new(&model.student.params, cfg.sgd_momentum, cfg.weight_decay),
            pred_opt: Sgd::new(&model.predictor, cfg.sgd_momentum, cfg.weight_decay),
            grads: model.student.params.zeros_like(),
            pred_grads: model.predictor.zeros_like(),
            weak: AugmentSpec::weak(cfg),
            contrastive: AugmentSpec::contrastive(cfg),
            model,
            bank,
            hyper_bank,
            step: 0,
            epoch: 0,
            cfg: cfg.clone(),
        })
    }

    pub fn temperatures(&self) -> Temperatures {
        Temperatures::from_config(&self.cfg)
    }

    /// Full batches per epoch (the last partial batch is dropped).
    pub fn steps_per_epoch(&self, train_len: usize) -> Result<usize> {
        let n = train_len / self.cfg.batch_size;
        if n == 0 {
            return Err(CghError::Dataset(format!(
                "training split of {train_len} images is smaller than one batch of {}",
                self.cfg.batch_size
            )));
        }
        Ok(n)
    }

    /// Learning rate for the current step under the configured schedule.
    pub fn lr(&self, train_len: usize) -> Result<f64> {
        let per = self.steps_per_epoch(train_len)?;
        Ok(cosine_lr(self.cfg.base_lr, self.step, self.cfg.epochs * per, self.cfg.warmup_epochs * per))
    }

    /// One optimizer step on `indices` of `data` at learning rate `lr`.
    pub fn train_step(&mut self, data: &Dataset, indices: &[usize], lr: f64) -> Result<StepMetrics> {
        self.train_step_observed(data, indices, lr, |_| {})
    }

    pub fn train_step_observed(
        &mut self,
        data: &Dataset,
        indices: &[usize],
        lr: f64,
        mut observe: impl FnMut(&StepObservation),
    ) -> Result<StepMetrics> {
        let start = Instant::now();
        if indices.len() > self.cfg.bank_size {
            return Err(CghError::BatchTooLarge { batch: indices.len(), capacity: self.cfg.bank_size });
        }
        let seed = self.cfg.seed;
        let pairs = indices
            .iter()
            .map(|&i| make_pair(&data.images[i], &self.weak, &self.contrastive, seed, self.epoch as u64, i as u64))
            .collect::<Result<Vec<_>>>()?;
        let x1 = FeatureMap::from_views(&pairs.iter().map(|p| &p.contrastive).collect::<Vec<_>>());
        let x2 = FeatureMap::from_views(&pairs.iter().map(|p| &p.weak).collect::<Vec<_>>());
        let with_hyper = self.cfg.uses_hypercolumn();

        let ModelState { net, student, teacher, predictor } = &mut self.model;
        let (zs, cache) = net.student_forward(student, predictor, &x1, with_hyper)?;
        let zt = net.embed(teacher, &x2, Stats::Batch)?;

        let (sg, sh) = (to_f64(&zs.global), zs.hyper.as_ref().map(to_f64));
        let (tg, th) = (to_f64(&zt.global), zt.hyper.as_ref().map(to_f64));
        let temps = Temperatures::from_config(&self.cfg);
        let out = cgh_loss_batch(
            EmbeddingBatch { global: sg.view(), hyper: sh.as_ref().map(|a| a.view()) },
            EmbeddingBatch { global: tg.view(), hyper: th.as_ref().map(|a| a.view()) },
            &self.bank,
            self.hyper_bank.as_ref(),
            temps,
            self.cfg.context,
        )?;
        if !out.loss.total.is_finite() {
            let (slo, shi) = row_norm_range(zs.global.view());
            let (tlo, thi) = row_norm_range(zt.global.view());
            return Err(CghError::NonFiniteLoss {
                step: self.step,
                diagnostics: format!(
                    "L_gh={} L_hg={} student |z| in [{slo:.4}, {shi:.4}] teacher |z| in [{tlo:.4}, {thi:.4}] \
                     max sim={:.4} tau_s={} tau_t={} tau_h={}",
                    out.loss.l_gh, out.loss.l_hg, out.max_similarity, temps.student, temps.teacher, temps.hyper
                ),
            });
        }

        let labels: Vec<i64> = indices.iter().map(|&i| data.labels[i] as i64).collect();
        observe(&StepObservation {
            teacher_global: out.teacher_global.view(),
            teacher_hyper: out.teacher_hyper.as_ref().map(|a| a.view()),
            bank_labels: self.bank.labels(),
            hyper_bank_labels: self.hyper_bank.as_ref().and_then(|b| b.labels()),
            labels: &labels,
        });

        self.grads.fill_zero();
        self.pred_grads.fill_zero();
        let dg = out.grad_global.mapv(|v| v as f32);
        let dh = out.grad_hyper.as_ref().map(|g| g.mapv(|v| v as f32));
        net.student_backward(student, predictor, &cache, &dg, dh.as_ref(), &mut self.grads, &mut self.pred_grads);
        self.opt.step(&mut student.params, &self.grads, lr)?;
        if !predictor.is_empty() {
            self.pred_opt.step(predictor, &self.pred_grads, lr)?;
        }
        ema_update(teacher, student, self.cfg.ema_momentum)?;

        if self.cfg.monitor.pr_analysis {
            self.bank.enqueue_labeled(tg.view(), &labels)?;
            if let (Some(b), Some(h)) = (self.hyper_bank.as_mut(), th.as_ref()) {
                b.enqueue_labeled(h.view(), &labels)?;
            }
        } else {
            self.bank.enqueue(tg.view())?;
            if let (Some(b), Some(h)) = (self.hyper_bank.as_mut(), th.as_ref()) {
                b.enqueue(h.view())?;
            }
        }
        self.step += 1;
        let (l_gh, l_hg) = match self.cfg.context {
            ContextVariant::Global => (out.loss.l_gh, 0.0),
            _ => (out.loss.l_gh, out.loss.l_hg),
        };
        Ok(StepMetrics {
            step: self.step,
            epoch: self.epoch,
            loss: out.loss.total,
            l_gh,
            l_hg,
            lr,
            step_time_ms: start.elapsed().as_secs_f64() * 1e3,
            knn_acc: None,
        })
    }

    /// Shuffled sample order for `epoch`.
    pub fn epoch_order(&self, train_len: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..train_len).collect();
        order.shuffle(&mut stream(self.cfg.seed, Stream::EpochOrder, &[epoch as u64]));
        order
    }

    /// Runs one full epoch, reporting every step through `on_step`.
    pub fn run_epoch(
        &mut self,
        data: &Dataset,
        mut observe: impl FnMut(&StepObservation),
        mut on_step: impl FnMut(StepMetrics) -> Result<()>,
    ) -> Result<()> {
        let per = self.steps_per_epoch(data.len())?;
        let order = self.epoch_order(data.len(), self.epoch);
        let bs = self.cfg.batch_size;
        for b in 0..per {
            let lr = self.lr(data.len())?;
            let m = self.train_step_observed(data, &order[b * bs..(b + 1) * bs], lr, &mut observe)?;
            on_step(m)?;
        }
        self.epoch += 1;
        Ok(())
    }

    // -- persistence ------------------------------------------------------

    pub fn to_archive(&self) -> Result<Archive> {
        let meta = serde_json::json!({
            "step": self.step,
            "epoch": self.epoch,
            "config_hash": self.cfg.hash(),
            "code_version": env!("CARGO_PKG_VERSION"),
        });
        let mut a = Archive::new(self.cfg.to_toml_string(), meta);
        a.push_store("student/param", &self.model.student.params)?;
        a.push_store("student/buffer", &self.model.student.buffers)?;
        a.push_store("teacher/param", &self.model.teacher.params)?;
        a.push_store("teacher/buffer", &self.model.teacher.buffers)?;
        a.push_store("predictor", &self.model.predictor)?;
        a.push_store("optim/velocity", &self.opt.velocity)?;
        a.push_store("optim/predictor_velocity", &self.pred_opt.velocity)?;
        push_bank(&mut a, "bank/global", &self.bank)?;
        if let Some(h) = &self.hyper_bank {
            push_bank(&mut a, "bank/hyper", h)?;
        }
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let cfg = TrainConfig::from_toml_str(&a.config_toml)?;
        let mut s = Self::new(&cfg)?;
        a.load_store("student/param", &mut s.model.student.params)?;
        a.load_store("student/buffer", &mut s.model.student.buffers)?;
        a.load_store("teacher/param", &mut s.model.teacher.params)?;
        a.load_store("teacher/buffer", &mut s.model.teacher.buffers)?;
        a.load_store("predictor", &mut s.model.predictor)?;
        let mut v = s.opt.velocity.clone();
        a.load_store("optim/velocity", &mut v)?;
        let mut pv = s.pred_opt.velocity.clone();
        a.load_store("optim/predictor_velocity", &mut pv)?;
        let field = |k: &str| {
            a.meta
                .get(k)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| CghError::Checkpoint(format!("meta.{k} missing")))
        };
        s.step = field("step")?;
        s.epoch = field("epoch")?;
        let started = s.step > 0;
        s.opt = if started { Sgd::from_velocity(v, cfg.sgd_momentum, cfg.weight_decay) } else { Sgd::new(&v, cfg.sgd_momentum, cfg.weight_decay) };
        s.pred_opt = if started { Sgd::from_velocity(pv, cfg.sgd_momentum, cfg.weight_decay) } else { Sgd::new(&pv, cfg.sgd_momentum, cfg.weight_decay) };
        s.bank = load_bank(a, "bank/global")?;
        s.hyper_bank = cfg.uses_hypercolumn().then(|| load_bank(a, "bank/hyper")).transpose()?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save_atomic(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

fn push_bank(a: &mut Archive, prefix: &str, b: &MemoryBank) -> Result<()> {
    let e = b.entries();
    a.push(format!("{prefix}/entries"), &[e.nrows(), e.ncols()], ArrayData::F64(e.iter().copied().collect()))?;
    a.push(format!("{prefix}/cursor"), &[1], ArrayData::I64(vec![b.cursor() as i64]))?;
    if let Some(l) = b.labels() {
        a.push(format!("{prefix}/labels"), &[l.len()], ArrayData::I64(l.to_vec()))?;
    }
    Ok(())
}

fn load_bank(a: &Archive, prefix: &str) -> Result<MemoryBank> {
    let e = a.require(&format!("{prefix}/entries"))?;
    let (ArrayData::F64(v), [m, d]) = (&e.data, e.dims.as_slice()) else {
        return Err(CghError::Checkpoint(format!("{prefix}/entries must be a 2-d f64 array")));
    };
    let entries = Array2::from_shape_vec((*m, *d), v.clone()).map_err(|e| CghError::Checkpoint(e.to_string()))?;
    let cursor = match &a.require(&format!("{prefix}/cursor"))?.data {
        ArrayData::I64(c) if c.len() == 1 && c[0] >= 0 => c[0] as usize,
        _ => return Err(CghError::Checkpoint(format!("{prefix}/cursor is malformed"))),
    };
    let labels = match a.get(&format!("{prefix}/labels")).map(|l| &l.data) {
        Some(ArrayData::I64(l)) => Some(l.clone()),
        Some(_) => return Err(CghError::Checkpoint(format!("{prefix}/labels is malformed"))),
        None => None,
    };
    MemoryBank::from_parts(entries, cursor, labels)
}

// ---------------------------------------------------------------------------
// Full runs

#[derive(Debug, Clone, Default)]
pub struct PretrainOptions {
    /// Parent directory for new runs.
    pub run_root: PathBuf,
    /// Continue an existing run directory from its last checkpoint.
    pub resume: Option<PathBuf>,
    /// Stop once this many epochs are complete (the schedule still spans `cfg.epochs`).
    pub stop_after_epoch: Option<usize>,
    /// Epoch checkpoints to keep besides `last.ckpt` (0 keeps all).
    pub keep_checkpoints: usize,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: Vec<StepMetrics>,
    /// (epoch, accuracy) from the online KNN monitor.
    pub knn_curve: Vec<(usize, f64)>,
    pub pr_records: Vec<PrRecord>,
}

/// Online KNN accuracy using unit-norm projector embeddings of the student.
pub fn knn_monitor(state: &TrainState, splits: &Splits) -> Result<f64> {
    let cfg = &state.cfg;
    let (mean, std) = cfg.mean_std();
    let train = splits.train.clone().truncated(cfg.monitor.knn_train_samples);
    let bs = cfg.batch_size.max(1);
    let net = &state.model.net;
    let w = &state.model.student;
    let ft = extract_features(net, w, &train, FeatureKind::Projected, mean, std, bs)?;
    let fv = extract_features(net, w, &splits.val, FeatureKind::Projected, mean, std, bs)?;
    let k = cfg.monitor.knn_k.min(train.len()).max(1);
    let r = knn_classify(ft.view(), &train.labels, fv.view(), &splits.val.labels, train.num_classes, &[k], Voting::default())?;
    Ok(r.best_accuracy)
}

struct PrTracker {
    global: PrAccumulator,
    hyper: Option<PrAccumulator>,
}

impl PrTracker {
    fn observe(&mut self, o: &StepObservation) {
        if let Some(l) = o.bank_labels {
            let _ = self.global.add_batch(o.teacher_global, l, o.labels);
        }
        if let (Some(acc), Some(d), Some(l)) = (self.hyper.as_mut(), o.teacher_hyper, o.hyper_bank_labels) {
            let _ = acc.add_batch(d, l, o.labels);
        }
    }

    fn drain(&mut self, epoch: usize) -> Vec<PrRecord> {
        let mut out = self.global.records(Some(epoch), "global");
        self.global.reset();
        if let Some(h) = self.hyper.as_mut() {
            out.extend(h.records(Some(epoch), "hypercolumn"));
            h.reset();
        }
        out
    }
}

/// Pretrains inside a run directory, checkpointing per `checkpoint_every`.
pub fn pretrain(cfg: &TrainConfig, splits: &Splits, opts: &PretrainOptions) -> Result<PretrainOutcome> {
    let (run, mut state) = match &opts.resume {
        Some(dir) => {
            let run = RunDir::open(dir)?;
            let state = TrainState::load(&run.last_checkpoint())?;
            run.truncate_logs(state.step, state.epoch)?;
            (run, state)
        }
        None => {
            let run = RunDir::create(&opts.run_root, cfg)?;
            (run, TrainState::new(cfg)?)
        }
    };
    let cfg = state.cfg.clone();
    let train = &splits.train;
    state.steps_per_epoch(train.len())?;
    let mut pr = cfg.monitor.pr_analysis.then(|| PrTracker {
        global: PrAccumulator::new(default_thresholds(cfg.bank_size)),
        hyper: cfg.uses_hypercolumn().then(|| PrAccumulator::new(default_thresholds(cfg.bank_size))),
    });
    let mut metrics = Vec::new();
    let mut knn_curve = Vec::new();
    let mut pr_records = Vec::new();
    let stop = opts.stop_after_epoch.unwrap_or(cfg.epochs).min(cfg.epochs);
    let mut checkpoint = run.last_checkpoint();
    while state.epoch < stop {
        let epoch = state.epoch;
        let mut pending: Option<StepMetrics> = None;
        let mut epoch_metrics = Vec::new();
        state.run_epoch(
            train,
            |o| {
                if let Some(p) = pr.as_mut() {
                    p.observe(o);
                }
            },
            |m| {
                if let Some(prev) = pending.replace(m) {
                    run.append_metrics(&prev)?;
                    epoch_metrics.push(prev);
                }
                Ok(())
            },
        )?;
        let mut last = pending.expect("at least one step per epoch");
        let done = epoch + 1;
        if cfg.monitor.knn_every > 0 && done % cfg.monitor.knn_every == 0 {
            let acc = knn_monitor(&state, splits)?;
            last.knn_acc = Some(acc);
            knn_curve.push((done, acc));
        }
        run.append_metrics(&last)?;
        epoch_metrics.push(last);
        log::info!(
            "epoch {done}/{} L={:.4} lr={:.4}{}",
            cfg.epochs,
            epoch_metrics.last().unwrap().loss,
            epoch_metrics.last().unwrap().lr,
            epoch_metrics.last().unwrap().knn_acc.map(|a| format!(" knn={a:.4}")).unwrap_or_default()
        );
        metrics.extend(epoch_metrics);
        if let Some(p) = pr.as_mut() {
            let recs = p.drain(epoch);
            run.append_pr(&recs)?;
            pr_records.extend(recs);
        }
        if done % cfg.checkpoint_every.max(1) == 0 || done == cfg.epochs || done == stop {
            checkpoint = run.save_checkpoint(&state, done, opts.keep_checkpoints)?;
        }
    }
    Ok(PretrainOutcome { run_dir: run.path().to_path_buf(), checkpoint, metrics, knn_curve, pr_records })
}
