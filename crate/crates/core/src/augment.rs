//! Weak and contrastive views.
//!
//! The weak pipeline is random-resized-crop + horizontal flip. The contrastive
//! pipeline follows the usual momentum-contrast recipe: random-resized-crop,
//! colour jitter (p = 0.8), grayscale (p = 0.2), Gaussian blur, horizontal flip.
//! Both end with channelwise mean/std normalization.

use rand::Rng as _;

use crate::config::TrainConfig;
use crate::data::SourceImage;
use crate::error::{CghError, Result};
use crate::rng::{stream, Rng, Stream};

/// Smallest accepted source side length.
pub const MIN_SIDE: usize = 4;

/// CHW float image.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl View {
    #[inline]
    fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Contrastive view for the student and weak view for the teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair {
    pub contrastive: View,
    pub weak: View,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSpec {
    pub out_size: usize,
    pub crop_scale: (f64, f64),
    pub crop_ratio: (f64, f64),
    pub flip_p: f64,
    pub jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_p: f64,
    pub blur_p: f64,
    pub blur_sigma: (f64, f64),
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl AugmentSpec {
    pub fn weak(cfg: &TrainConfig) -> Self {
        let (mean, std) = cfg.mean_std();
        let a = &cfg.augment;
        Self {
            out_size: cfg.image_size(),
            crop_scale: a.weak_crop_scale,
            crop_ratio: a.crop_ratio,
            flip_p: a.flip_p,
            jitter_p: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            grayscale_p: 0.0,
            blur_p: 0.0,
            blur_sigma: a.blur_sigma,
            mean,
            std,
        }
    }

    pub fn contrastive(cfg: &TrainConfig) -> Self {
        let (mean, std) = cfg.mean_std();
        let a = &cfg.augment;
        Self {
            out_size: cfg.image_size(),
            crop_scale: a.contrastive_crop_scale,
            crop_ratio: a.crop_ratio,
            flip_p: a.flip_p,
            jitter_p: a.jitter_p,
            brightness: a.brightness,
            contrast: a.contrast,
            saturation: a.saturation,
            hue: a.hue,
            grayscale_p: a.grayscale_p,
            blur_p: cfg.blur_p(),
            blur_sigma: a.blur_sigma,
            mean,
            std,
        }
    }

    /// Full-image crop, every random transform disabled.
    pub fn identity(out_size: usize, mean: [f32; 3], std: [f32; 3]) -> Self {
        Self {
            out_size,
            crop_scale: (1.0, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_p: 0.0,
            jitter_p: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            grayscale_p: 0.0,
            blur_p: 0.0,
            blur_sigma: (0.1, 2.0),
            mean,
            std,
        }
    }
}

/// Which random transforms fired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AugmentTrace {
    /// (top, left, height, width) of the crop in source pixels.
    pub crop: (usize, usize, usize, usize),
    pub flipped: bool,
    pub jittered: bool,
    pub grayscale: bool,
    pub blurred: bool,
}

pub fn augment(image: &SourceImage, spec: &AugmentSpec, rng: &mut Rng) -> Result<View> {
    augment_traced(image, spec, rng).map(|(v, _)| v)
}

pub fn augment_traced(image: &SourceImage, spec: &AugmentSpec, rng: &mut Rng) -> Result<(View, AugmentTrace)> {
    check_size(image)?;
    let mut trace = AugmentTrace::default();
    let crop = random_resized_crop_box(image.width, image.height, spec.crop_scale, spec.crop_ratio, rng);
    trace.crop = crop;
    let mut view = crop_resize(image, crop, spec.out_size);

    if spec.jitter_p > 0.0 && rng.random_bool(spec.jitter_p) {
        trace.jittered = true;
        color_jitter(&mut view, spec, rng);
    }
    if spec.grayscale_p > 0.0 && rng.random_bool(spec.grayscale_p) {
        trace.grayscale = true;
        grayscale(&mut view);
    }
    if spec.blur_p > 0.0 && rng.random_bool(spec.blur_p) {
        trace.blurred = true;
        let sigma = rng.random_range(spec.blur_sigma.0..=spec.blur_sigma.1);
        gaussian_blur(&mut view, sigma as f32);
    }
    if spec.flip_p > 0.0 && rng.random_bool(spec.flip_p) {
        trace.flipped = true;
        hflip(&mut view);
    }
    normalize(&mut view, spec.mean, spec.std);
    Ok((view, trace))
}

/// Teacher input: crop + flip.
pub fn augment_weak(image: &SourceImage, spec: &AugmentSpec, rng: &mut Rng) -> Result<View> {
    augment(image, spec, rng)
}

/// Student input: the full contrastive pipeline.
pub fn augment_contrastive(image: &SourceImage, spec: &AugmentSpec, rng: &mut Rng) -> Result<View> {
    augment(image, spec, rng)
}

/// Builds both views from independent streams keyed by `(seed, epoch, index)`.
pub fn make_pair(
    image: &SourceImage,
    weak: &AugmentSpec,
    contrastive: &AugmentSpec,
    seed: u64,
    epoch: u64,
    index: u64,
) -> Result<AugmentedPair> {
    let mut rw = stream(seed, Stream::WeakView, &[epoch, index]);
    let mut rc = stream(seed, Stream::ContrastiveView, &[epoch, index]);
    Ok(AugmentedPair {
        weak: augment_weak(image, weak, &mut rw)?,
        contrastive: augment_contrastive(image, contrastive, &mut rc)?,
    })
}

/// Deterministic evaluation view: whole image resized, normalized.
pub fn eval_view(image: &SourceImage, out_size: usize, mean: [f32; 3], std: [f32; 3]) -> Result<View> {
    check_size(image)?;
    let mut v = crop_resize(image, (0, 0, image.height, image.width), out_size);
    normalize(&mut v, mean, std);
    Ok(v)
}

fn check_size(image: &SourceImage) -> Result<()> {
    if image.width < MIN_SIDE || image.height < MIN_SIDE {
        return Err(CghError::ImageTooSmall {
            width: image.width,
            height: image.height,
            min: MIN_SIDE,
        });
    }
    Ok(())
}

/// Crop box sampling of the standard random-resized-crop transform.
pub fn random_resized_crop_box(
    width: usize,
    height: usize,
    scale: (f64, f64),
    ratio: (f64, f64),
    rng: &mut Rng,
) -> (usize, usize, usize, usize) {
    let area = (width * height) as f64;
    let (lr0, lr1) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..10 {
        let target = area * if scale.0 < scale.1 { rng.random_range(scale.0..=scale.1) } else { scale.0 };
        let aspect = if lr0 < lr1 { rng.random_range(lr0..=lr1).exp() } else { lr0.exp() };
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let top = rng.random_range(0..=height - h);
            let left = rng.random_range(0..=width - w);
            return (top, left, h, w);
        }
    }
    // Fallback: centre crop at the clamped aspect ratio.
    let in_ratio = width as f64 / height as f64;
    let (w, h) = if in_ratio < ratio.0 {
        (width, ((width as f64 / ratio.0).round() as usize).min(height))
    } else if in_ratio > ratio.1 {
        (((height as f64 * ratio.1).round() as usize).min(width), height)
    } else {
        (width, height)
    };
    ((height - h) / 2, (width - w) / 2, h, w)
}

/// Bilinear resize (half-pixel centres) of a source crop to `size`x`size`, scaled to [0, 1].
pub fn crop_resize(image: &SourceImage, crop: (usize, usize, usize, usize), size: usize) -> View {
    let (top, left, ch, cw) = crop;
    let sy = ch as f32 / size as f32;
    let sx = cw as f32 / size as f32;
    let mut data = vec![0f32; 3 * size * size];
    let axis = |o: usize, scale: f32, len: usize| -> (usize, usize, f32) {
        let src = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f32)
    };
    for oy in 0..size {
        let (y0, y1, fy) = axis(oy, sy, ch);
        for ox in 0..size {
            let (x0, x1, fx) = axis(ox, sx, cw);
            for c in 0..3 {
                let p = |y: usize, x: usize| image.at(c, top + y, left + x) as f32;
                let top_row = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot_row = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                data[(c * size + oy) * size + ox] = (top_row * (1.0 - fy) + bot_row * fy) / 255.0;
            }
        }
    }
    View { height: size, width: size, data }
}

fn luminance(view: &View) -> Vec<f32> {
    let (r, g, b) = (view.plane(0), view.plane(1), view.plane(2));
    r.iter()
        .zip(g)
        .zip(b)
        .map(|((r, g), b)| 0.299 * r + 0.587 * g + 0.114 * b)
        .collect()
}

fn blend_with(view: &mut View, other: &[f32], factor: f32, per_pixel: bool) {
    let n = view.height * view.width;
    for c in 0..3 {
        for i in 0..n {
            let o = if per_pixel { other[i] } else { other[0] };
            let v = &mut view.data[c * n + i];
            *v = (o + factor * (*v - o)).clamp(0.0, 1.0);
        }
    }
}

fn color_jitter(view: &mut View, spec: &AugmentSpec, rng: &mut Rng) {
    let mut order = [0usize, 1, 2, 3];
    for i in (1..4).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let factor = |s: f64, rng: &mut Rng| -> Option<f32> {
        (s > 0.0).then(|| rng.random_range((1.0 - s).max(0.0)..=1.0 + s) as f32)
    };
    for op in order {
        match op {
            0 => {
                if let Some(f) = factor(spec.brightness, rng) {
                    view.data.iter_mut().for_each(|v| *v = (*v * f).clamp(0.0, 1.0));
                }
            }
            1 => {
                if let Some(f) = factor(spec.contrast, rng) {
                    let lum = luminance(view);
                    let mean = lum.iter().sum::<f32>() / lum.len() as f32;
                    blend_with(view, &[mean], f, false);
                }
            }
            2 => {
                if let Some(f) = factor(spec.saturation, rng) {
                    let lum = luminance(view);
                    blend_with(view, &lum, f, true);
                }
            }
            _ => {
                if spec.hue > 0.0 {
                    let shift = rng.random_range(-spec.hue..=spec.hue) as f32;
                    hue_shift(view, shift);
                }
            }
        }
    }
}

fn hue_shift(view: &mut View, shift: f32) {
    let n = view.height * view.width;
    for i in 0..n {
        let (r, g, b) = (view.data[i], view.data[n + i], view.data[2 * n + i]);
        let (h, s, v) = rgb_to_hsv(r, g, b);
        let (r, g, b) = hsv_to_rgb((h + shift).rem_euclid(1.0), s, v);
        view.data[i] = r;
        view.data[n + i] = g;
        view.data[2 * n + i] = b;
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let i = (h6.floor() as i32).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn grayscale(view: &mut View) {
    let lum = luminance(view);
    let n = lum.len();
    for c in 0..3 {
        view.data[c * n..(c + 1) * n].copy_from_slice(&lum);
    }
}

fn gaussian_blur(view: &mut View, sigma: f32) {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let (h, w) = (view.height as isize, view.width as isize);
    let reflect = |i: isize, n: isize| -> usize {
        let period = 2 * (n - 1).max(1);
        let m = i.rem_euclid(period);
        (if m >= n { period - m } else { m }) as usize
    };
    let n = view.height * view.width;
    let mut tmp = vec![0f32; n];
    for c in 0..3 {
        let plane = &mut view.data[c * n..(c + 1) * n];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let xx = reflect(x + k as isize - radius, w);
                    acc += kv * plane[y as usize * w as usize + xx];
                }
                tmp[(y * w + x) as usize] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let yy = reflect(y + k as isize - radius, h);
                    acc += kv * tmp[yy * w as usize + x as usize];
                }
                plane[(y * w + x) as usize] = acc;
            }
        }
    }
}

fn hflip(view: &mut View) {
    let w = view.width;
    for row in view.data.chunks_exact_mut(w) {
        row.reverse();
    }
}

fn normalize(view: &mut View, mean: [f32; 3], std: [f32; 3]) {
    let n = view.height * view.width;
    for c in 0..3 {
        for v in &mut view.data[c * n..(c + 1) * n] {
            *v = (*v - mean[c]) / std[c];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{BackboneId, DatasetId};
    use crate::data::synthetic;

    fn cfg() -> TrainConfig {
        TrainConfig::new(DatasetId::Synthetic, BackboneId::ResnetTiny)
    }

    fn sample_image() -> SourceImage {
        synthetic(1, 1, 40, 3, 0).images.remove(0)
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let img = sample_image();
        let c = cfg();
        for spec in [AugmentSpec::weak(&c), AugmentSpec::contrastive(&c)] {
            let a = augment(&img, &spec, &mut stream(1, Stream::WeakView, &[0])).unwrap();
            let b = augment(&img, &spec, &mut stream(1, Stream::WeakView, &[0])).unwrap();
            assert_eq!(a, b);
            assert_eq!((a.height, a.width), (32, 32));
            assert!(a.is_finite());
        }
    }

    #[test]
    fn identity_configuration_equals_resized_original() {
        let img = sample_image();
        let (mean, std) = ([0.5, 0.4, 0.3], [0.2, 0.25, 0.3]);
        let spec = AugmentSpec::identity(32, mean, std);
        let expected = eval_view(&img, 32, mean, std).unwrap();
        for seed in 0..20 {
            let mut rng = stream(seed, Stream::ContrastiveView, &[]);
            let (v, trace) = augment_traced(&img, &spec, &mut rng).unwrap();
            assert_eq!(trace.crop, (0, 0, 40, 40));
            assert_eq!(v, expected);
        }
    }

    #[test]
    fn same_size_resize_is_exact_copy() {
        let img = sample_image();
        let v = crop_resize(&img, (0, 0, 40, 40), 40);
        for (a, b) in v.data.iter().zip(&img.data) {
            assert!((a * 255.0 - *b as f32).abs() < 1e-3);
        }
    }

    #[test]
    fn normalization_is_channelwise() {
        let img = SourceImage::filled(8, 8, [255, 0, 51]);
        let v = eval_view(&img, 8, [0.5, 0.5, 0.5], [0.5, 0.25, 0.1]).unwrap();
        assert!((v.data[0] - 1.0).abs() < 1e-6);
        assert!((v.data[64] + 2.0).abs() < 1e-6);
        assert!((v.data[128] - (0.2 - 0.5) / 0.1).abs() < 1e-5);
    }

    #[test]
    fn tiny_image_is_rejected() {
        let img = SourceImage::filled(3, 10, [0, 0, 0]);
        let err = augment(&img, &AugmentSpec::weak(&cfg()), &mut stream(0, Stream::WeakView, &[])).unwrap_err();
        assert!(matches!(err, CghError::ImageTooSmall { .. }));
    }

    #[test]
    fn grayscale_equalizes_channels() {
        let mut v = crop_resize(&sample_image(), (0, 0, 40, 40), 16);
        grayscale(&mut v);
        assert_eq!(v.plane(0), v.plane(1));
        assert_eq!(v.plane(1), v.plane(2));
    }

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.2f32, 0.7, 0.1), (0.9, 0.1, 0.5), (0.3, 0.3, 0.3), (0.0, 0.0, 1.0)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-5 && (g - g2).abs() < 1e-5 && (b - b2).abs() < 1e-5);
        }
    }

    #[test]
    fn blur_preserves_constant_planes() {
        let mut v = crop_resize(&SourceImage::filled(12, 12, [100, 100, 100]), (0, 0, 12, 12), 12);
        gaussian_blur(&mut v, 1.5);
        for x in &v.data {
            assert!((x - 100.0 / 255.0).abs() < 1e-5);
        }
    }

    #[test]
    fn weak_view_independent_of_contrastive_config() {
        let img = sample_image();
        let c = cfg();
        let weak = AugmentSpec::weak(&c);
        let mut other = AugmentSpec::contrastive(&c);
        let p1 = make_pair(&img, &weak, &AugmentSpec::contrastive(&c), 5, 2, 9).unwrap();
        other.grayscale_p = 1.0;
        other.jitter_p = 0.0;
        let p2 = make_pair(&img, &weak, &other, 5, 2, 9).unwrap();
        assert_eq!(p1.weak, p2.weak);
        assert_ne!(p1.contrastive, p2.contrastive);
    }
}
