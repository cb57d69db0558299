//! Layers with explicit forward and backward passes.
//!
//! Feature maps are stored channel-major as a `[C, N*H*W]` matrix so that a
//! convolution is a single GEMM against the im2col matrix and batch-norm
//! statistics are row reductions.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, Normal, Uniform};

use super::store::{ParamId, ParamStore, Tensor};
use crate::augment::View;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    /// `[C, N*H*W]`
    pub data: Array2<f32>,
}

impl FeatureMap {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self { n, h, w, data: Array2::zeros((c, n * h * w)) }
    }

    pub fn c(&self) -> usize {
        self.data.nrows()
    }

    pub fn from_views(views: &[&View]) -> Self {
        let n = views.len();
        let (h, w) = (views[0].height, views[0].width);
        let hw = h * w;
        let mut data = Array2::zeros((3, n * hw));
        for (i, v) in views.iter().enumerate() {
            assert_eq!((v.height, v.width), (h, w), "views in a batch must share a size");
            for c in 0..3 {
                data.slice_mut(s![c, i * hw..(i + 1) * hw])
                    .iter_mut()
                    .zip(&v.data[c * hw..(c + 1) * hw])
                    .for_each(|(d, s)| *d = *s);
            }
        }
        Self { n, h, w, data }
    }

    /// Value at channel `c`, sample `i`, row `y`, column `x`.
    pub fn at(&self, c: usize, i: usize, y: usize, x: usize) -> f32 {
        self.data[[c, (i * self.h + y) * self.w + x]]
    }
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Kaiming-normal (fan-out, ReLU gain) initialized, bias-free.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        let std = (2.0 / (cout * k * k) as f32).sqrt();
        let normal = Normal::new(0.0f32, std).expect("valid std");
        let data = (0..cout * cin * k * k).map(|_| normal.sample(rng)).collect();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::from_vec(&[cout, cin, k, k], data).expect("shape"),
        );
        Self { weight, cin, cout, k, stride, pad }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn forward(&self, p: &ParamStore, x: &FeatureMap) -> FeatureMap {
        assert_eq!(x.c(), self.cin, "conv input channels");
        let (ho, wo) = self.out_hw(x.h, x.w);
        let wmat = p.get(self.weight).as_matrix();
        let mut out = Array2::zeros((self.cout, x.n * ho * wo));
        if self.is_pointwise() {
            general_mat_mul(1.0, &wmat, &x.data, 0.0, &mut out);
        } else {
            let cols = im2col(x, self.k, self.stride, self.pad, ho, wo);
            general_mat_mul(1.0, &wmat, &cols, 0.0, &mut out);
        }
        FeatureMap { n: x.n, h: ho, w: wo, data: out }
    }

    /// Accumulates the weight gradient; returns the input gradient when requested.
    pub fn backward(
        &self,
        p: &ParamStore,
        x: &FeatureMap,
        dy: &FeatureMap,
        grads: &mut ParamStore,
        need_dx: bool,
    ) -> Option<FeatureMap> {
        let wmat = p.get(self.weight).as_matrix();
        let cols_owned;
        let cols: ArrayView2<f32> = if self.is_pointwise() {
            x.data.view()
        } else {
            cols_owned = im2col(x, self.k, self.stride, self.pad, dy.h, dy.w);
            cols_owned.view()
        };
        {
            let mut gw = grads.get_mut(self.weight).as_matrix_mut();
            general_mat_mul(1.0, &dy.data, &cols.t(), 1.0, &mut gw);
        }
        if !need_dx {
            return None;
        }
        let mut dcols = Array2::zeros(cols.raw_dim());
        general_mat_mul(1.0, &wmat.t(), &dy.data, 0.0, &mut dcols);
        if self.is_pointwise() {
            Some(FeatureMap { n: x.n, h: x.h, w: x.w, data: dcols })
        } else {
            Some(col2im(&dcols, x, self.k, self.stride, self.pad, dy.h, dy.w))
        }
    }
}

fn im2col(x: &FeatureMap, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Array2<f32> {
    let (n, h, w, c) = (x.n, x.h, x.w, x.c());
    let mut cols = Array2::<f32>::zeros((c * k * k, n * ho * wo));
    let src = x.data.as_slice().expect("contiguous feature map");
    let dst = cols.as_slice_mut().expect("contiguous");
    let row_len = n * ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let out = &mut dst[row * row_len..(row + 1) * row_len];
                for i in 0..n {
                    let plane = &src[ci * n * h * w + i * h * w..][..h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..][..w];
                        let dst_row = &mut out[(i * ho + oy) * wo..][..wo];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f32>, x: &FeatureMap, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> FeatureMap {
    let (n, h, w, c) = (x.n, x.h, x.w, x.c());
    let mut dx = Array2::<f32>::zeros((c, n * h * w));
    let src = cols.as_slice().expect("contiguous");
    let dst = dx.as_slice_mut().expect("contiguous");
    let row_len = n * ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let inp = &src[row * row_len..(row + 1) * row_len];
                for i in 0..n {
                    let plane = &mut dst[ci * n * h * w + i * h * w..][..h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &inp[(i * ho + oy) * wo..][..wo];
                        let dst_row = &mut plane[iy as usize * w..][..w];
                        for (ox, s) in src_row.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    FeatureMap { n, h, w, data: dx }
}

// ---------------------------------------------------------------------------
// Batch normalization

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f32,
    pub momentum: f32,
}

/// How a batch-norm layer obtains its statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics, running statistics updated.
    Train,
    /// Batch statistics, running statistics left alone.
    BatchStats,
    /// Running statistics.
    Eval,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Array2<f32>,
    inv_std: Array1<f32>,
}

impl BatchNorm {
    pub fn new(params: &mut ParamStore, buffers: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: params.add(format!("{name}.weight"), Tensor::filled(&[channels], 1.0)),
            beta: params.add(format!("{name}.bias"), Tensor::zeros(&[channels])),
            running_mean: buffers.add(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: buffers.add(format!("{name}.running_var"), Tensor::filled(&[channels], 1.0)),
            channels,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    /// Batch-statistics forward. Running statistics are updated when `running` is given.
    pub fn forward_batch(
        &self,
        p: &ParamStore,
        running: Option<&mut ParamStore>,
        x: &FeatureMap,
    ) -> (FeatureMap, BnCache) {
        let m = x.data.ncols();
        assert!(m > 0, "batch norm over an empty batch");
        let mean = x.data.mean_axis(Axis(1)).expect("nonempty");
        let centered = &x.data - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).mean_axis(Axis(1)).expect("nonempty");
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let xhat = &centered * &inv_std.view().insert_axis(Axis(1));
        let gamma = p.get(self.gamma).as_vector();
        let beta = p.get(self.beta).as_vector();
        let y = &xhat * &gamma.insert_axis(Axis(1)) + &beta.insert_axis(Axis(1));
        if let Some(bufs) = running {
            let unbias = if m > 1 { m as f32 / (m - 1) as f32 } else { 1.0 };
            let mo = self.momentum;
            bufs.get_mut(self.running_mean)
                .data
                .iter_mut()
                .zip(mean.iter())
                .for_each(|(r, b)| *r = (1.0 - mo) * *r + mo * b);
            bufs.get_mut(self.running_var)
                .data
                .iter_mut()
                .zip(var.iter())
                .for_each(|(r, b)| *r = (1.0 - mo) * *r + mo * b * unbias);
        }
        (
            FeatureMap { n: x.n, h: x.h, w: x.w, data: y },
            BnCache { xhat, inv_std },
        )
    }

    pub fn forward_eval(&self, p: &ParamStore, bufs: &ParamStore, x: &FeatureMap) -> FeatureMap {
        let gamma = p.get(self.gamma).as_vector();
        let beta = p.get(self.beta).as_vector();
        let mean = bufs.get(self.running_mean).as_vector();
        let var = bufs.get(self.running_var).as_vector();
        let scale: Array1<f32> = gamma
            .iter()
            .zip(var.iter())
            .map(|(g, v)| g / (v + self.eps).sqrt())
            .collect();
        let shift: Array1<f32> = beta
            .iter()
            .zip(mean.iter())
            .zip(scale.iter())
            .map(|((b, m), s)| b - m * s)
            .collect();
        let y = &x.data * &scale.view().insert_axis(Axis(1)) + &shift.view().insert_axis(Axis(1));
        FeatureMap { n: x.n, h: x.h, w: x.w, data: y }
    }

    pub fn forward(&self, p: &ParamStore, bufs: &mut ParamStore, x: &FeatureMap, mode: BnMode) -> FeatureMap {
        match mode {
            BnMode::Train => self.forward_batch(p, Some(bufs), x).0,
            BnMode::BatchStats => self.forward_batch(p, None, x).0,
            BnMode::Eval => self.forward_eval(p, bufs, x),
        }
    }

    pub fn backward(&self, p: &ParamStore, cache: &BnCache, dy: &FeatureMap, grads: &mut ParamStore) -> FeatureMap {
        let m = dy.data.ncols() as f32;
        let dbeta = dy.data.sum_axis(Axis(1));
        let dgamma = (&dy.data * &cache.xhat).sum_axis(Axis(1));
        grads
            .get_mut(self.beta)
            .data
            .iter_mut()
            .zip(dbeta.iter())
            .for_each(|(g, d)| *g += d);
        grads
            .get_mut(self.gamma)
            .data
            .iter_mut()
            .zip(dgamma.iter())
            .for_each(|(g, d)| *g += d);
        let gamma = p.get(self.gamma).as_vector();
        // dx = gamma * inv_std / m * (m*dy - sum(dy) - xhat * sum(dy*xhat))
        let coef: Array1<f32> = gamma
            .iter()
            .zip(cache.inv_std.iter())
            .map(|(g, s)| g * s / m)
            .collect();
        let mut dx = &dy.data * m;
        dx -= &dbeta.view().insert_axis(Axis(1));
        dx -= &(&cache.xhat * &dgamma.view().insert_axis(Axis(1)));
        dx *= &coef.view().insert_axis(Axis(1));
        FeatureMap { n: dy.n, h: dy.h, w: dy.w, data: dx }
    }
}

// ---------------------------------------------------------------------------
// Linear

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    /// Uniform(-1/sqrt(din), 1/sqrt(din)) init for weight and bias.
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (din as f32).sqrt();
        let u = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        let w = (0..din * dout).map(|_| u.sample(rng)).collect();
        let b = (0..dout).map(|_| u.sample(rng)).collect();
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::from_vec(&[dout, din], w).expect("shape")),
            bias: store.add(format!("{name}.bias"), Tensor::from_vec(&[dout], b).expect("shape")),
            din,
            dout,
        }
    }

    /// `x: [N, din] -> [N, dout]`
    pub fn forward(&self, p: &ParamStore, x: &Array2<f32>) -> Array2<f32> {
        assert_eq!(x.ncols(), self.din, "linear input dim");
        let w = p.get(self.weight).as_matrix();
        let b = p.get(self.bias).as_vector();
        let mut y = Array2::zeros((x.nrows(), self.dout));
        y += &b.insert_axis(Axis(0));
        general_mat_mul(1.0, x, &w.t(), 1.0, &mut y);
        y
    }

    pub fn backward(&self, p: &ParamStore, x: &Array2<f32>, dy: &Array2<f32>, grads: &mut ParamStore, need_dx: bool) -> Option<Array2<f32>> {
        {
            let mut gw = grads.get_mut(self.weight).as_matrix_mut();
            general_mat_mul(1.0, &dy.t(), x, 1.0, &mut gw);
        }
        let db = dy.sum_axis(Axis(0));
        grads
            .get_mut(self.bias)
            .data
            .iter_mut()
            .zip(db.iter())
            .for_each(|(g, d)| *g += d);
        need_dx.then(|| dy.dot(&p.get(self.weight).as_matrix()))
    }
}

// ---------------------------------------------------------------------------
// Stateless ops

pub fn relu_inplace(x: &mut Array2<f32>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes `dy` where the ReLU output was not positive.
pub fn relu_backward(y: &Array2<f32>, dy: &mut Array2<f32>) {
    ndarray::Zip::from(dy).and(y).for_each(|d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
}

/// Global average pool: `[C, N*H*W] -> [N, C]`.
pub fn global_avg_pool(x: &FeatureMap) -> Array2<f32> {
    let hw = x.h * x.w;
    let c = x.c();
    let mut out = Array2::zeros((x.n, c));
    let src = x.data.as_slice().expect("contiguous");
    for ci in 0..c {
        for i in 0..x.n {
            let plane = &src[ci * x.n * hw + i * hw..][..hw];
            out[[i, ci]] = plane.iter().sum::<f32>() / hw as f32;
        }
    }
    out
}

pub fn global_avg_pool_backward(dy: &Array2<f32>, c: usize, n: usize, h: usize, w: usize) -> FeatureMap {
    let hw = h * w;
    let mut dx = FeatureMap::zeros(c, n, h, w);
    let dst = dx.data.as_slice_mut().expect("contiguous");
    for ci in 0..c {
        for i in 0..n {
            let v = dy[[i, ci]] / hw as f32;
            dst[ci * n * hw + i * hw..][..hw].iter_mut().for_each(|d| *d = v);
        }
    }
    dx
}

fn adaptive_bounds(out: usize, len: usize, i: usize) -> (usize, usize) {
    let start = i * len / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

/// Adaptive average pooling of every plane to `oh` x `ow`.
pub fn adaptive_avg_pool(x: &FeatureMap, oh: usize, ow: usize) -> FeatureMap {
    if x.h == oh && x.w == ow {
        return x.clone();
    }
    let (n, c) = (x.n, x.c());
    let mut out = FeatureMap::zeros(c, n, oh, ow);
    let src = x.data.as_slice().expect("contiguous");
    let dst = out.data.as_slice_mut().expect("contiguous");
    for plane_idx in 0..c * n {
        let sp = &src[plane_idx * x.h * x.w..][..x.h * x.w];
        let dp = &mut dst[plane_idx * oh * ow..][..oh * ow];
        for oy in 0..oh {
            let (y0, y1) = adaptive_bounds(oh, x.h, oy);
            for ox in 0..ow {
                let (x0, x1) = adaptive_bounds(ow, x.w, ox);
                let mut acc = 0.0;
                for yy in y0..y1 {
                    acc += sp[yy * x.w + x0..yy * x.w + x1].iter().sum::<f32>();
                }
                dp[oy * ow + ox] = acc / ((y1 - y0) * (x1 - x0)) as f32;
            }
        }
    }
    out
}

pub fn adaptive_avg_pool_backward(dy: &FeatureMap, h: usize, w: usize) -> FeatureMap {
    if dy.h == h && dy.w == w {
        return dy.clone();
    }
    let (n, c, oh, ow) = (dy.n, dy.c(), dy.h, dy.w);
    let mut dx = FeatureMap::zeros(c, n, h, w);
    let src = dy.data.as_slice().expect("contiguous");
    let dst = dx.data.as_slice_mut().expect("contiguous");
    for plane_idx in 0..c * n {
        let sp = &src[plane_idx * oh * ow..][..oh * ow];
        let dp = &mut dst[plane_idx * h * w..][..h * w];
        for oy in 0..oh {
            let (y0, y1) = adaptive_bounds(oh, h, oy);
            for ox in 0..ow {
                let (x0, x1) = adaptive_bounds(ow, w, ox);
                let g = sp[oy * ow + ox] / ((y1 - y0) * (x1 - x0)) as f32;
                for yy in y0..y1 {
                    dp[yy * w + x0..yy * w + x1].iter_mut().for_each(|d| *d += g);
                }
            }
        }
    }
    dx
}

/// 3x3, stride 2, padding 1 max pool. Returns the output and argmax indices.
pub fn max_pool_3x3s2(x: &FeatureMap) -> (FeatureMap, Vec<u32>) {
    let (n, c, h, w) = (x.n, x.c(), x.h, x.w);
    let oh = (h + 2 - 3) / 2 + 1;
    let ow = (w + 2 - 3) / 2 + 1;
    let mut out = FeatureMap::zeros(c, n, oh, ow);
    let mut arg = vec![0u32; c * n * oh * ow];
    let src = x.data.as_slice().expect("contiguous");
    let dst = out.data.as_slice_mut().expect("contiguous");
    for plane_idx in 0..c * n {
        let sp = &src[plane_idx * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_i = 0usize;
                for ky in 0..3 {
                    let iy = (oy * 2 + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * 2 + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = iy as usize * w + ix as usize;
                        if sp[idx] > best {
                            best = sp[idx];
                            best_i = idx;
                        }
                    }
                }
                let o = plane_idx * oh * ow + oy * ow + ox;
                dst[o] = best;
                arg[o] = best_i as u32;
            }
        }
    }
    (out, arg)
}

pub fn max_pool_backward(dy: &FeatureMap, arg: &[u32], h: usize, w: usize) -> FeatureMap {
    let (n, c, oh, ow) = (dy.n, dy.c(), dy.h, dy.w);
    let mut dx = FeatureMap::zeros(c, n, h, w);
    let src = dy.data.as_slice().expect("contiguous");
    let dst = dx.data.as_slice_mut().expect("contiguous");
    for plane_idx in 0..c * n {
        for o in 0..oh * ow {
            let i = plane_idx * oh * ow + o;
            dst[plane_idx * h * w + arg[i] as usize] += src[i];
        }
    }
    dx
}

/// Row-wise L2 normalization. Returns the normalized rows and the row norms,
/// or `None` if some row is zero.
pub fn l2_normalize_rows(x: &Array2<f32>) -> Option<(Array2<f32>, Array1<f32>)> {
    let norms: Array1<f32> = x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if norms.iter().any(|&n| !(n > 0.0) || !n.is_finite()) {
        return None;
    }
    let z = x / &norms.view().insert_axis(Axis(1));
    Some((z, norms))
}

/// Gradient through `z = u / |u|`: `(dz - (dz . z) z) / |u|`.
pub fn l2_normalize_backward(z: &Array2<f32>, norms: &Array1<f32>, dz: &Array2<f32>) -> Array2<f32> {
    let mut du = dz.clone();
    for ((mut row, zr), &n) in du.rows_mut().into_iter().zip(z.rows()).zip(norms.iter()) {
        let proj = row.dot(&zr);
        row.zip_mut_with(&zr, |d, &zv| *d = (*d - proj * zv) / n);
    }
    du
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use ndarray::Array;

    fn rng() -> Rng {
        stream(11, Stream::ModelInit, &[])
    }

    fn random_map(c: usize, n: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut r = stream(seed, Stream::Probe, &[]);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        FeatureMap {
            n,
            h,
            w,
            data: Array::from_shape_fn((c, n * h * w), |_| normal.sample(&mut r)),
        }
    }

    /// Direct nested-loop convolution.
    fn naive_conv(x: &FeatureMap, wt: &Tensor, cout: usize, k: usize, s: usize, p: usize) -> FeatureMap {
        let cin = x.c();
        let ho = (x.h + 2 * p - k) / s + 1;
        let wo = (x.w + 2 * p - k) / s + 1;
        let mut out = FeatureMap::zeros(cout, x.n, ho, wo);
        for co in 0..cout {
            for i in 0..x.n {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0f64;
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w {
                                        let wv = wt.data[((co * cin + ci) * k + ky) * k + kx];
                                        acc += (wv * x.at(ci, i, iy as usize, ix as usize)) as f64;
                                    }
                                }
                            }
                        }
                        out.data[[co, (i * ho + oy) * wo + ox]] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut store = ParamStore::new();
        let mut r = rng();
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0)] {
            let conv = Conv2d::new(&mut store, "c", 3, 4, k, s, p, &mut r);
            let x = random_map(3, 2, 7, 6, k as u64 + s as u64);
            let y = conv.forward(&store, &x);
            let expect = naive_conv(&x, store.get(conv.weight), 4, k, s, p);
            assert_eq!((y.h, y.w), (expect.h, expect.w));
            for (a, b) in y.data.iter().zip(expect.data.iter()) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    /// Central differences of `sum(out * probe)` against the analytic backward.
    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "c", 2, 3, 3, 2, 1, &mut rng());
        let x = random_map(2, 2, 5, 5, 1);
        let y = conv.forward(&store, &x);
        let probe = random_map(3, 2, y.h, y.w, 2);
        let mut grads = store.zeros_like();
        let dx = conv.backward(&store, &x, &probe, &mut grads, true).unwrap();
        let objective = |st: &ParamStore, xx: &FeatureMap| -> f64 {
            let yy = conv.forward(st, xx);
            yy.data.iter().zip(probe.data.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let eps = 1e-2f32;
        for idx in [0usize, 7, 20, 40] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data.as_slice_mut().unwrap()[idx] += eps;
            xm.data.as_slice_mut().unwrap()[idx] -= eps;
            let fd = (objective(&store, &xp) - objective(&store, &xm)) / (2.0 * eps as f64);
            let an = dx.data.as_slice().unwrap()[idx] as f64;
            assert!((fd - an).abs() < 1e-2 * (1.0 + an.abs()), "dx[{idx}] fd={fd} an={an}");
        }
        for idx in [0usize, 5, 31, 53] {
            let mut sp = store.clone();
            let mut sm = store.clone();
            sp.get_mut(conv.weight).data[idx] += eps;
            sm.get_mut(conv.weight).data[idx] -= eps;
            let fd = (objective(&sp, &x) - objective(&sm, &x)) / (2.0 * eps as f64);
            let an = grads.get(conv.weight).data[idx] as f64;
            assert!((fd - an).abs() < 1e-2 * (1.0 + an.abs()), "dw[{idx}] fd={fd} an={an}");
        }
    }

    #[test]
    fn batchnorm_backward_matches_finite_differences() {
        let mut params = ParamStore::new();
        let mut bufs = ParamStore::new();
        let bn = BatchNorm::new(&mut params, &mut bufs, "bn", 3);
        params.get_mut(bn.gamma).data = vec![0.5, 1.5, -1.0];
        params.get_mut(bn.beta).data = vec![0.1, -0.2, 0.3];
        let x = random_map(3, 2, 3, 3, 4);
        let probe = random_map(3, 2, 3, 3, 5);
        let (_, cache) = bn.forward_batch(&params, None, &x);
        let mut grads = params.zeros_like();
        let dx = bn.backward(&params, &cache, &probe, &mut grads);
        let objective = |p: &ParamStore, xx: &FeatureMap| -> f64 {
            let (y, _) = bn.forward_batch(p, None, xx);
            y.data.iter().zip(probe.data.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let eps = 1e-2f32;
        for idx in [0usize, 9, 25, 50] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data.as_slice_mut().unwrap()[idx] += eps;
            xm.data.as_slice_mut().unwrap()[idx] -= eps;
            let fd = (objective(&params, &xp) - objective(&params, &xm)) / (2.0 * eps as f64);
            let an = dx.data.as_slice().unwrap()[idx] as f64;
            assert!((fd - an).abs() < 2e-2 * (1.0 + an.abs()), "dx[{idx}] fd={fd} an={an}");
        }
        for c in 0..3 {
            let mut pp = params.clone();
            let mut pm = params.clone();
            pp.get_mut(bn.gamma).data[c] += eps;
            pm.get_mut(bn.gamma).data[c] -= eps;
            let fd = (objective(&pp, &x) - objective(&pm, &x)) / (2.0 * eps as f64);
            let an = grads.get(bn.gamma).data[c] as f64;
            assert!((fd - an).abs() < 1e-2 * (1.0 + an.abs()));
        }
    }

    #[test]
    fn batchnorm_train_normalizes_and_tracks_running_stats() {
        let mut params = ParamStore::new();
        let mut bufs = ParamStore::new();
        let bn = BatchNorm::new(&mut params, &mut bufs, "bn", 2);
        let x = random_map(2, 4, 2, 2, 8);
        let y = bn.forward(&params, &mut bufs, &x, BnMode::Train);
        for row in y.data.rows() {
            let m = row.mean().unwrap();
            let v = row.mapv(|a| (a - m) * (a - m)).mean().unwrap();
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-3);
        }
        let rm = bufs.get(bn.running_mean).data.clone();
        let expected = 0.1 * x.data.row(0).mean().unwrap();
        assert!((rm[0] - expected).abs() < 1e-6);
        let before = bufs.clone();
        bn.forward(&params, &mut bufs, &x, BnMode::BatchStats);
        assert_eq!(before, bufs);
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "fc", 4, 3, &mut rng());
        let mut r = stream(3, Stream::Probe, &[]);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let x = Array::from_shape_fn((2, 4), |_| normal.sample(&mut r));
        let probe = Array::from_shape_fn((2, 3), |_| normal.sample(&mut r));
        let mut grads = store.zeros_like();
        let dx = lin.backward(&store, &x, &probe, &mut grads, true).unwrap();
        let obj = |st: &ParamStore, xx: &Array2<f32>| -> f64 {
            (lin.forward(st, xx) * &probe).iter().map(|v| *v as f64).sum()
        };
        let eps = 1e-2;
        for (i, j) in [(0, 0), (1, 3)] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[[i, j]] += eps;
            xm[[i, j]] -= eps;
            let fd = (obj(&store, &xp) - obj(&store, &xm)) / (2.0 * eps as f64);
            assert!((fd - dx[[i, j]] as f64).abs() < 1e-3);
        }
        let mut sp = store.clone();
        let mut sm = store.clone();
        sp.get_mut(lin.bias).data[1] += eps;
        sm.get_mut(lin.bias).data[1] -= eps;
        let fd = (obj(&sp, &x) - obj(&sm, &x)) / (2.0 * eps as f64);
        assert!((fd - grads.get(lin.bias).data[1] as f64).abs() < 1e-3);
    }

    #[test]
    fn pools_and_their_adjoints() {
        let x = random_map(2, 3, 6, 6, 9);
        let g = global_avg_pool(&x);
        assert_eq!(g.dim(), (3, 2));
        let manual: f32 = (0..6).flat_map(|y| (0..6).map(move |xx| (y, xx))).map(|(y, xx)| x.at(1, 2, y, xx)).sum::<f32>() / 36.0;
        assert!((g[[2, 1]] - manual).abs() < 1e-5);

        // <pool(x), y> == <x, pool^T(y)>
        let p = adaptive_avg_pool(&x, 4, 4);
        let probe = random_map(2, 3, 4, 4, 10);
        let back = adaptive_avg_pool_backward(&probe, 6, 6);
        let lhs: f32 = (&p.data * &probe.data).sum();
        let rhs: f32 = (&x.data * &back.data).sum();
        assert!((lhs - rhs).abs() < 1e-3);

        let (m, arg) = max_pool_3x3s2(&x);
        assert_eq!((m.h, m.w), (3, 3));
        let probe = random_map(2, 3, 3, 3, 11);
        let back = max_pool_backward(&probe, &arg, 6, 6);
        let lhs: f32 = (&m.data * &probe.data).sum();
        let rhs: f32 = (&x.data * &back.data).sum();
        assert!((lhs - rhs).abs() < 1e-3);
    }

    #[test]
    fn l2_normalize_backward_is_tangent() {
        let x = ndarray::array![[3.0f32, 4.0], [1.0, 0.0]];
        let (z, n) = l2_normalize_rows(&x).unwrap();
        assert_eq!(n[0], 5.0);
        let dz = ndarray::array![[1.0f32, 2.0], [0.5, 0.5]];
        let du = l2_normalize_backward(&z, &n, &dz);
        for (r, zr) in du.rows().into_iter().zip(z.rows()) {
            assert!(r.dot(&zr).abs() < 1e-6);
        }
        assert!(l2_normalize_rows(&ndarray::array![[0.0f32, 0.0]]).is_none());
    }
}
