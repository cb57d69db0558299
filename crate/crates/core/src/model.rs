//! Residual encoder, hypercolumn head and projection heads.
//!
//! A [`Network`] is the architecture only: every layer refers to its tensors
//! through [`ParamId`]s. The actual numbers live in [`Weights`], one copy for
//! the student and one for the EMA teacher, built from the same layout.

use ndarray::{concatenate, s, Array1, Array2, Axis};

use crate::config::{BackboneId, StemKind, TrainConfig};
use crate::error::{CghError, Result};
use crate::nn::layers::{
    adaptive_avg_pool, adaptive_avg_pool_backward, global_avg_pool, global_avg_pool_backward,
    l2_normalize_backward, l2_normalize_rows, max_pool_3x3s2, max_pool_backward, relu_backward,
    relu_inplace, BnCache,
};
use crate::nn::{BatchNorm, Conv2d, FeatureMap, Linear, ParamStore};
use crate::rng::{stream, Rng, Stream};

/// Outputs of the four residual stages.
#[derive(Debug, Clone)]
pub struct FeatureMapSet(pub Vec<FeatureMap>);

impl FeatureMapSet {
    pub fn block(&self, l: usize) -> &FeatureMap {
        &self.0[l - 1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub params: ParamStore,
    pub buffers: ParamStore,
}

impl Weights {
    pub fn same_layout(&self, other: &Weights) -> bool {
        self.params.same_layout(&other.params) && self.buffers.same_layout(&other.buffers)
    }
}

/// Where batch-norm statistics come from in an inference pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stats {
    Batch,
    Running,
}

enum Pass<'a> {
    Train(&'a mut ParamStore),
    Infer(&'a ParamStore, Stats),
}

impl Pass<'_> {
    fn bn(&mut self, bn: &BatchNorm, p: &ParamStore, x: &FeatureMap) -> (FeatureMap, Option<BnCache>) {
        match self {
            Pass::Train(bufs) => {
                let (y, c) = bn.forward_batch(p, Some(&mut **bufs), x);
                (y, Some(c))
            }
            Pass::Infer(_, Stats::Batch) => (bn.forward_batch(p, None, x).0, None),
            Pass::Infer(bufs, Stats::Running) => (bn.forward_eval(p, bufs, x), None),
        }
    }

    fn caching(&self) -> bool {
        matches!(self, Pass::Train(_))
    }
}

// ---------------------------------------------------------------------------
// Residual blocks

#[derive(Debug, Clone)]
pub struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    shortcut: Option<(Conv2d, BatchNorm)>,
}

struct BlockCache {
    x: FeatureMap,
    bn1: BnCache,
    a1: FeatureMap,
    bn2: BnCache,
    sc: Option<BnCache>,
    y: FeatureMap,
}

impl BasicBlock {
    fn new(p: &mut ParamStore, b: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut Rng) -> Self {
        let shortcut = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(p, &format!("{name}.downsample.0"), cin, cout, 1, stride, 0, rng),
                BatchNorm::new(p, b, &format!("{name}.downsample.1"), cout),
            )
        });
        Self {
            conv1: Conv2d::new(p, &format!("{name}.conv1"), cin, cout, 3, stride, 1, rng),
            bn1: BatchNorm::new(p, b, &format!("{name}.bn1"), cout),
            conv2: Conv2d::new(p, &format!("{name}.conv2"), cout, cout, 3, 1, 1, rng),
            bn2: BatchNorm::new(p, b, &format!("{name}.bn2"), cout),
            shortcut,
        }
    }

    fn forward(&self, p: &ParamStore, pass: &mut Pass, x: &FeatureMap) -> (FeatureMap, Option<BlockCache>) {
        let h1 = self.conv1.forward(p, x);
        let (mut a1, c1) = pass.bn(&self.bn1, p, &h1);
        relu_inplace(&mut a1.data);
        let h2 = self.conv2.forward(p, &a1);
        let (mut y, c2) = pass.bn(&self.bn2, p, &h2);
        let csc = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(p, x);
                let (s, c) = pass.bn(bn, p, &s);
                y.data += &s.data;
                c
            }
            None => {
                y.data += &x.data;
                None
            }
        };
        relu_inplace(&mut y.data);
        let cache = pass.caching().then(|| BlockCache {
            x: x.clone(),
            bn1: c1.expect("train pass caches"),
            a1,
            bn2: c2.expect("train pass caches"),
            sc: csc,
            y: y.clone(),
        });
        (y, cache)
    }

    fn backward(&self, p: &ParamStore, cache: &BlockCache, mut dy: FeatureMap, grads: &mut ParamStore, need_dx: bool) -> Option<FeatureMap> {
        relu_backward(&cache.y.data, &mut dy.data);
        let dh2 = self.bn2.backward(p, &cache.bn2, &dy, grads);
        let mut da1 = self
            .conv2
            .backward(p, &cache.a1, &dh2, grads, true)
            .expect("dx requested");
        relu_backward(&cache.a1.data, &mut da1.data);
        let dh1 = self.bn1.backward(p, &cache.bn1, &da1, grads);
        let dx_main = self.conv1.backward(p, &cache.x, &dh1, grads, need_dx);
        let dx_short = match &self.shortcut {
            Some((conv, bn)) => {
                let ds = bn.backward(p, cache.sc.as_ref().expect("shortcut cache"), &dy, grads);
                conv.backward(p, &cache.x, &ds, grads, need_dx)
            }
            None => need_dx.then_some(dy),
        };
        match (dx_main, dx_short) {
            (Some(mut a), Some(b)) => {
                a.data += &b.data;
                Some(a)
            }
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Backbone

#[derive(Debug, Clone)]
pub struct Backbone {
    stem_conv: Conv2d,
    stem_bn: BatchNorm,
    stem_pool: bool,
    stages: Vec<Vec<BasicBlock>>,
    pub widths: [usize; 4],
}

struct StemCache {
    x: FeatureMap,
    bn: BnCache,
    a: FeatureMap,
    pool_arg: Option<Vec<u32>>,
}

pub struct BackboneCache {
    stem: StemCache,
    blocks: Vec<Vec<BlockCache>>,
}

/// Stage widths and blocks per stage.
pub fn backbone_shape(id: BackboneId) -> ([usize; 4], usize) {
    match id {
        BackboneId::ResnetTiny => ([16, 32, 64, 128], 1),
        BackboneId::ResnetSmall => ([64, 128, 256, 512], 1),
        BackboneId::Resnet18 => ([64, 128, 256, 512], 2),
    }
}

impl Backbone {
    pub fn new(p: &mut ParamStore, b: &mut ParamStore, widths: [usize; 4], blocks_per_stage: usize, stem: StemKind, rng: &mut Rng) -> Self {
        let imagenet = stem == StemKind::Imagenet;
        let stem_conv = Conv2d::new(p, "conv1", 3, widths[0], 3, if imagenet { 2 } else { 1 }, 1, rng);
        let stem_bn = BatchNorm::new(p, b, "bn1", widths[0]);
        let mut stages = Vec::with_capacity(4);
        let mut cin = widths[0];
        for (si, &w) in widths.iter().enumerate() {
            let mut blocks = Vec::with_capacity(blocks_per_stage);
            for bi in 0..blocks_per_stage {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(p, b, &format!("layer{}.{bi}", si + 1), cin, w, stride, rng));
                cin = w;
            }
            stages.push(blocks);
        }
        Self { stem_conv, stem_bn, stem_pool: imagenet, stages, widths }
    }

    /// Spatial sizes of the four stage outputs for a square input.
    pub fn stage_sizes(&self, input: usize) -> [usize; 4] {
        let mut s = self.stem_conv.out_hw(input, input).0;
        if self.stem_pool {
            s = (s + 2 - 3) / 2 + 1;
        }
        let mut out = [0; 4];
        for (i, stage) in self.stages.iter().enumerate() {
            for blk in stage {
                s = blk.conv1.out_hw(s, s).0;
            }
            out[i] = s;
        }
        out
    }

    fn forward(&self, p: &ParamStore, pass: &mut Pass, x: &FeatureMap) -> (FeatureMapSet, Option<BackboneCache>) {
        let h = self.stem_conv.forward(p, x);
        let (mut a, bn_cache) = pass.bn(&self.stem_bn, p, &h);
        relu_inplace(&mut a.data);
        let (mut cur, pool_arg) = if self.stem_pool {
            let (o, arg) = max_pool_3x3s2(&a);
            (o, Some(arg))
        } else {
            (a.clone(), None)
        };
        let caching = pass.caching();
        let mut maps = Vec::with_capacity(4);
        let mut block_caches = Vec::with_capacity(4);
        for stage in &self.stages {
            let mut caches = Vec::new();
            for blk in stage {
                let (y, c) = blk.forward(p, pass, &cur);
                if let Some(c) = c {
                    caches.push(c);
                }
                cur = y;
            }
            maps.push(cur.clone());
            block_caches.push(caches);
        }
        let cache = caching.then(|| BackboneCache {
            stem: StemCache {
                x: x.clone(),
                bn: bn_cache.expect("train pass caches"),
                a,
                pool_arg,
            },
            blocks: block_caches,
        });
        (FeatureMapSet(maps), cache)
    }

    /// `dmaps[l]` is the loss gradient w.r.t. the output of stage `l + 1`.
    fn backward(&self, p: &ParamStore, cache: &BackboneCache, mut dmaps: Vec<Option<FeatureMap>>, grads: &mut ParamStore) {
        let mut carry: Option<FeatureMap> = None;
        for si in (0..4).rev() {
            let d = match (carry.take(), dmaps[si].take()) {
                (Some(mut a), Some(b)) => {
                    a.data += &b.data;
                    Some(a)
                }
                (a, b) => a.or(b),
            };
            let Some(mut d) = d else { continue };
            for (blk, c) in self.stages[si].iter().zip(&cache.blocks[si]).rev() {
                d = blk.backward(p, c, d, grads, true).expect("dx requested");
            }
            carry = Some(d);
        }
        let Some(d) = carry else { return };
        let st = &cache.stem;
        let mut da = match &st.pool_arg {
            Some(arg) => max_pool_backward(&d, arg, st.a.h, st.a.w),
            None => d,
        };
        relu_backward(&st.a.data, &mut da.data);
        let dh = self.stem_bn.backward(p, &st.bn, &da, grads);
        self.stem_conv.backward(p, &st.x, &dh, grads, false);
    }
}

// ---------------------------------------------------------------------------
// Hypercolumn head

/// Downsample selected stage outputs to block-4 resolution, concatenate,
/// 1x1 conv + BN + ReLU, global average pool.
#[derive(Debug, Clone)]
pub struct HyperHead {
    pub layers: Vec<usize>,
    pub conv: Conv2d,
    pub bn: Option<BatchNorm>,
}

pub struct HyperCache {
    shapes: Vec<(usize, usize, usize)>,
    concat: FeatureMap,
    bn: Option<BnCache>,
    act: FeatureMap,
}

/// Spatially aligned channel concatenation of the selected maps.
pub fn hypercolumn_stack(maps: &FeatureMapSet, layers: &[usize]) -> Result<FeatureMap> {
    if layers.is_empty() {
        return Err(CghError::invalid("layer_set", "must be nonempty"));
    }
    let last = maps.0.last().ok_or_else(|| CghError::Shape("no feature maps".into()))?;
    let (th, tw) = (last.h, last.w);
    let mut pooled = Vec::with_capacity(layers.len());
    for &l in layers {
        let m = maps
            .0
            .get(l.wrapping_sub(1))
            .ok_or_else(|| CghError::invalid("layer_set", format!("block {l} does not exist")))?;
        if m.h < th || m.w < tw {
            return Err(CghError::Shape(format!(
                "block {l} map {}x{} is smaller than the block-4 size {th}x{tw}",
                m.h, m.w
            )));
        }
        pooled.push(adaptive_avg_pool(m, th, tw));
    }
    let views: Vec<_> = pooled.iter().map(|m| m.data.view()).collect();
    let data = concatenate(Axis(0), &views).map_err(|e| CghError::Shape(e.to_string()))?;
    Ok(FeatureMap { n: last.n, h: th, w: tw, data })
}

impl HyperHead {
    pub fn new(p: &mut ParamStore, b: &mut ParamStore, layers: &[usize], widths: [usize; 4], dim: usize, rng: &mut Rng) -> Self {
        let cin: usize = layers.iter().map(|&l| widths[l - 1]).sum();
        Self {
            layers: layers.to_vec(),
            conv: Conv2d::new(p, "hyper.conv", cin, dim, 1, 1, 0, rng),
            bn: Some(BatchNorm::new(p, b, "hyper.bn", dim)),
        }
    }

    fn forward(&self, p: &ParamStore, pass: &mut Pass, maps: &FeatureMapSet) -> Result<(Array2<f32>, Option<HyperCache>)> {
        let concat = hypercolumn_stack(maps, &self.layers)?;
        let h = self.conv.forward(p, &concat);
        let (mut act, bn_cache) = match &self.bn {
            Some(bn) => pass.bn(bn, p, &h),
            None => (h, None),
        };
        relu_inplace(&mut act.data);
        let out = global_avg_pool(&act);
        let cache = pass.caching().then(|| HyperCache {
            shapes: self.layers.iter().map(|&l| {
                let m = maps.block(l);
                (m.c(), m.h, m.w)
            }).collect(),
            concat,
            bn: bn_cache,
            act,
        });
        Ok((out, cache))
    }

    fn backward(&self, p: &ParamStore, cache: &HyperCache, dout: &Array2<f32>, grads: &mut ParamStore) -> Vec<Option<FeatureMap>> {
        let act = &cache.act;
        let mut d = global_avg_pool_backward(dout, act.c(), act.n, act.h, act.w);
        relu_backward(&act.data, &mut d.data);
        if let (Some(bn), Some(c)) = (&self.bn, &cache.bn) {
            d = bn.backward(p, c, &d, grads);
        }
        let dcat = self
            .conv
            .backward(p, &cache.concat, &d, grads, true)
            .expect("dx requested");
        let mut dmaps: Vec<Option<FeatureMap>> = vec![None, None, None, None];
        let mut row = 0;
        for (&l, &(c, h, w)) in self.layers.iter().zip(&cache.shapes) {
            let part = FeatureMap {
                n: dcat.n,
                h: dcat.h,
                w: dcat.w,
                data: dcat.data.slice(s![row..row + c, ..]).to_owned(),
            };
            row += c;
            dmaps[l - 1] = Some(adaptive_avg_pool_backward(&part, h, w));
        }
        dmaps
    }
}

// ---------------------------------------------------------------------------
// Projection MLP

/// Linear -> ReLU -> Linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct MlpCache {
    x: Array2<f32>,
    a1: Array2<f32>,
    z: Array2<f32>,
    norms: Array1<f32>,
}

impl Mlp {
    pub fn new(p: &mut ParamStore, name: &str, din: usize, hidden: usize, dout: usize, rng: &mut Rng) -> Self {
        Self {
            fc1: Linear::new(p, &format!("{name}.0"), din, hidden, rng),
            fc2: Linear::new(p, &format!("{name}.2"), hidden, dout, rng),
        }
    }

    pub fn forward_raw(&self, p: &ParamStore, x: &Array2<f32>) -> (Array2<f32>, Array2<f32>) {
        let mut a1 = self.fc1.forward(p, x);
        relu_inplace(&mut a1);
        let out = self.fc2.forward(p, &a1);
        (a1, out)
    }

    /// MLP followed by row-wise L2 normalization.
    pub fn embed(&self, p: &ParamStore, x: &Array2<f32>) -> Result<Array2<f32>> {
        if x.ncols() != self.fc1.din {
            return Err(CghError::Shape(format!(
                "projector expects {}-d input, got {}",
                self.fc1.din,
                x.ncols()
            )));
        }
        let (_, out) = self.forward_raw(p, x);
        Ok(l2_normalize_rows(&out).ok_or(CghError::ZeroVector)?.0)
    }

    fn embed_cached(&self, p: &ParamStore, x: &Array2<f32>) -> Result<(Array2<f32>, MlpCache)> {
        let (a1, out) = self.forward_raw(p, x);
        let (z, norms) = l2_normalize_rows(&out).ok_or(CghError::ZeroVector)?;
        Ok((z.clone(), MlpCache { x: x.clone(), a1, z, norms }))
    }

    fn backward(&self, p: &ParamStore, cache: &MlpCache, dz: &Array2<f32>, grads: &mut ParamStore) -> Array2<f32> {
        let dout = l2_normalize_backward(&cache.z, &cache.norms, dz);
        let mut da1 = self
            .fc2
            .backward(p, &cache.a1, &dout, grads, true)
            .expect("dx requested");
        relu_backward(&cache.a1, &mut da1);
        self.fc1
            .backward(p, &cache.x, &da1, grads, true)
            .expect("dx requested")
    }
}

// ---------------------------------------------------------------------------
// Whole network

#[derive(Debug, Clone)]
pub struct Network {
    pub backbone: Backbone,
    pub hyper: Option<HyperHead>,
    pub proj_g: Mlp,
    pub proj_h: Option<Mlp>,
    /// Student-only predictors, parameters in [`ModelState::predictor`].
    pub pred_g: Option<Mlp>,
    pub pred_h: Option<Mlp>,
    pub image_size: usize,
}

/// Pooled global context and, when the hypercolumn head exists, hypercolumn context.
#[derive(Debug, Clone)]
pub struct Contexts {
    pub global: Array2<f32>,
    pub hyper: Option<Array2<f32>>,
}

/// Unit-norm embeddings for a batch.
#[derive(Debug, Clone)]
pub struct Embeddings {
    pub global: Array2<f32>,
    pub hyper: Option<Array2<f32>>,
}

pub struct EncoderCache {
    backbone: BackboneCache,
    hyper: Option<HyperCache>,
    map_shape: (usize, usize, usize, usize),
}

pub struct StudentCache {
    encoder: EncoderCache,
    proj_g: MlpCache,
    proj_h: Option<MlpCache>,
    pred_g: Option<MlpCache>,
    pred_h: Option<MlpCache>,
}

pub fn resolve_stem(cfg: &TrainConfig) -> StemKind {
    match cfg.stem {
        StemKind::Auto if cfg.image_size() <= 32 => StemKind::Cifar,
        StemKind::Auto => StemKind::Imagenet,
        s => s,
    }
}

impl Network {
    /// Builds the architecture plus freshly initialized student weights and
    /// predictor parameters.
    pub fn build(cfg: &TrainConfig) -> (Network, Weights, ParamStore) {
        let mut rng = stream(cfg.seed, Stream::ModelInit, &[0]);
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let (widths, blocks) = backbone_shape(cfg.backbone);
        let backbone = Backbone::new(&mut params, &mut buffers, widths, blocks, resolve_stem(cfg), &mut rng);
        let hyper = cfg.uses_hypercolumn().then(|| {
            HyperHead::new(&mut params, &mut buffers, &cfg.layer_set, widths, cfg.hyper_dim, &mut rng)
        });
        let proj_g = Mlp::new(&mut params, "proj_g", widths[3], cfg.hidden_dim, cfg.embed_dim, &mut rng);
        let proj_h = cfg
            .uses_hypercolumn()
            .then(|| Mlp::new(&mut params, "proj_h", cfg.hyper_dim, cfg.hidden_dim, cfg.embed_dim, &mut rng));

        let mut prng = stream(cfg.seed, Stream::ModelInit, &[1]);
        let mut predictor = ParamStore::new();
        let (pred_g, pred_h) = if cfg.use_predictor {
            (
                Some(Mlp::new(&mut predictor, "pred_g", cfg.embed_dim, cfg.hidden_dim, cfg.embed_dim, &mut prng)),
                cfg.uses_hypercolumn().then(|| {
                    Mlp::new(&mut predictor, "pred_h", cfg.embed_dim, cfg.hidden_dim, cfg.embed_dim, &mut prng)
                }),
            )
        } else {
            (None, None)
        };
        let net = Network {
            backbone,
            hyper,
            proj_g,
            proj_h,
            pred_g,
            pred_h,
            image_size: cfg.image_size(),
        };
        (net, Weights { params, buffers }, predictor)
    }

    pub fn global_dim(&self) -> usize {
        self.backbone.widths[3]
    }

    pub fn hyper_dim(&self) -> Option<usize> {
        self.hyper.as_ref().map(|h| h.conv.cout)
    }

    fn check_input(&self, x: &FeatureMap) -> Result<()> {
        if x.c() != 3 || x.h != self.image_size || x.w != self.image_size || x.n == 0 {
            return Err(CghError::Shape(format!(
                "expected a nonempty batch of 3x{s}x{s} views, got {}x{}x{} (n = {})",
                x.c(),
                x.h,
                x.w,
                x.n,
                s = self.image_size
            )));
        }
        Ok(())
    }

    /// All four stage outputs and the pooled global context.
    pub fn forward_backbone(&self, w: &Weights, x: &FeatureMap, stats: Stats) -> Result<(FeatureMapSet, Array2<f32>)> {
        self.check_input(x)?;
        let mut pass = Pass::Infer(&w.buffers, stats);
        let (maps, _) = self.backbone.forward(&w.params, &mut pass, x);
        let global = global_avg_pool(maps.block(4));
        Ok((maps, global))
    }

    /// Hypercolumn context from precomputed stage outputs.
    pub fn build_hypercolumn(&self, w: &Weights, maps: &FeatureMapSet, stats: Stats) -> Result<Array2<f32>> {
        let head = self
            .hyper
            .as_ref()
            .ok_or_else(|| CghError::invalid("context", "global variant has no hypercolumn head"))?;
        let mut pass = Pass::Infer(&w.buffers, stats);
        Ok(head.forward(&w.params, &mut pass, maps)?.0)
    }

    pub fn encode(&self, w: &Weights, x: &FeatureMap, stats: Stats) -> Result<Contexts> {
        let (maps, global) = self.forward_backbone(w, x, stats)?;
        let hyper = match &self.hyper {
            Some(_) => Some(self.build_hypercolumn(w, &maps, stats)?),
            None => None,
        };
        Ok(Contexts { global, hyper })
    }

    /// Projected embeddings without predictors (teacher path and probes).
    pub fn embed(&self, w: &Weights, x: &FeatureMap, stats: Stats) -> Result<Embeddings> {
        let ctx = self.encode(w, x, stats)?;
        self.project_contexts(w, &ctx)
    }

    pub fn project_contexts(&self, w: &Weights, ctx: &Contexts) -> Result<Embeddings> {
        let global = self.proj_g.embed(&w.params, &ctx.global)?;
        let hyper = match (&self.proj_h, &ctx.hyper) {
            (Some(ph), Some(h)) => Some(ph.embed(&w.params, h)?),
            _ => None,
        };
        Ok(Embeddings { global, hyper })
    }

    /// Training-mode encoder pass: batch statistics, running stats updated, caches kept.
    pub fn encode_train(&self, w: &mut Weights, x: &FeatureMap, with_hyper: bool) -> Result<(Contexts, EncoderCache)> {
        self.check_input(x)?;
        let Weights { params, buffers } = w;
        let mut pass = Pass::Train(buffers);
        let (maps, bcache) = self.backbone.forward(params, &mut pass, x);
        let last = maps.block(4);
        let map_shape = (last.c(), last.n, last.h, last.w);
        let global = global_avg_pool(last);
        let (hyper, hcache) = match (&self.hyper, with_hyper) {
            (Some(head), true) => {
                let (h, c) = head.forward(params, &mut pass, &maps)?;
                (Some(h), c)
            }
            _ => (None, None),
        };
        Ok((
            Contexts { global, hyper },
            EncoderCache {
                backbone: bcache.expect("train pass caches"),
                hyper: hcache,
                map_shape,
            },
        ))
    }

    /// Backpropagates context gradients into the encoder parameters.
    pub fn encoder_backward(&self, w: &Weights, cache: &EncoderCache, dglobal: Option<&Array2<f32>>, dhyper: Option<&Array2<f32>>, grads: &mut ParamStore) {
        let mut dmaps: Vec<Option<FeatureMap>> = match (&self.hyper, &cache.hyper, dhyper) {
            (Some(head), Some(hc), Some(dh)) => head.backward(&w.params, hc, dh, grads),
            _ => vec![None, None, None, None],
        };
        if let Some(dg) = dglobal {
            let (c, n, h, wd) = cache.map_shape;
            let d4 = global_avg_pool_backward(dg, c, n, h, wd);
            dmaps[3] = Some(match dmaps[3].take() {
                Some(mut a) => {
                    a.data += &d4.data;
                    a
                }
                None => d4,
            });
        }
        self.backbone.backward(&w.params, &cache.backbone, dmaps, grads);
    }

    /// Student pass: encoder, projectors, optional predictors; all cached.
    pub fn student_forward(&self, w: &mut Weights, predictor: &ParamStore, x: &FeatureMap, with_hyper: bool) -> Result<(Embeddings, StudentCache)> {
        let (ctx, encoder) = self.encode_train(w, x, with_hyper)?;
        let (mut zg, proj_g) = self.proj_g.embed_cached(&w.params, &ctx.global)?;
        let pred_g = match &self.pred_g {
            Some(m) => {
                let (z, c) = m.embed_cached(predictor, &zg)?;
                zg = z;
                Some(c)
            }
            None => None,
        };
        let (zh, proj_h, pred_h) = match (&self.proj_h, &ctx.hyper) {
            (Some(ph), Some(h)) => {
                let (mut z, c) = ph.embed_cached(&w.params, h)?;
                let pc = match &self.pred_h {
                    Some(m) => {
                        let (zz, pc) = m.embed_cached(predictor, &z)?;
                        z = zz;
                        Some(pc)
                    }
                    None => None,
                };
                (Some(z), Some(c), pc)
            }
            _ => (None, None, None),
        };
        Ok((
            Embeddings { global: zg, hyper: zh },
            StudentCache { encoder, proj_g, proj_h, pred_g, pred_h },
        ))
    }

    /// Backward from embedding gradients to student and predictor parameters.
    #[allow(clippy::too_many_arguments)]
    pub fn student_backward(
        &self,
        w: &Weights,
        predictor: &ParamStore,
        cache: &StudentCache,
        dz_g: &Array2<f32>,
        dz_h: Option<&Array2<f32>>,
        grads: &mut ParamStore,
        pred_grads: &mut ParamStore,
    ) {
        let mut dg = dz_g.clone();
        if let (Some(m), Some(c)) = (&self.pred_g, &cache.pred_g) {
            dg = m.backward(predictor, c, &dg, pred_grads);
        }
        let dglobal = self.proj_g.backward(&w.params, &cache.proj_g, &dg, grads);
        let dhyper = match (&self.proj_h, &cache.proj_h, dz_h) {
            (Some(ph), Some(pc), Some(dh)) => {
                let mut d = dh.clone();
                if let (Some(m), Some(c)) = (&self.pred_h, &cache.pred_h) {
                    d = m.backward(predictor, c, &d, pred_grads);
                }
                Some(ph.backward(&w.params, pc, &d, grads))
            }
            _ => None,
        };
        self.encoder_backward(w, &cache.encoder, Some(&dglobal), dhyper.as_ref(), grads);
    }
}

/// Student, EMA teacher and student-only predictor parameters.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub net: Network,
    pub student: Weights,
    pub teacher: Weights,
    pub predictor: ParamStore,
}

impl ModelState {
    /// Teacher starts as an exact copy of the student.
    pub fn new(cfg: &TrainConfig) -> Self {
        let (net, student, predictor) = Network::build(cfg);
        let teacher = student.clone();
        Self { net, student, teacher, predictor }
    }
}
