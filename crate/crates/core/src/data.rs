//! Image datasets.
//!
//! Images are held in memory as 8-bit CHW RGB. Supported sources:
//!
//! * `synthetic` - procedurally generated class-conditional textures.
//! * `cifar10` / `cifar100` - the binary archive layout (`data_batch_*.bin`,
//!   `test_batch.bin` / `train.bin`, `test.bin`).
//! * `stl10` - `train_X.bin`, `train_y.bin`, `test_X.bin`, `test_y.bin`.
//! * `tiny-imagenet` / `image-folder` - a folder of images plus `train.txt`
//!   and `val.txt` index files with one `<relative-path> <label>` per line.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{DatasetId, TrainConfig};
use crate::error::{CghError, Result};
use crate::rng::{stream, Stream};

pub const DATA_ROOT_ENV: &str = "CGH_DATA_ROOT";

/// 8-bit RGB image in channel-major layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl SourceImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(CghError::Shape(format!(
                "image buffer has {} bytes, expected 3x{width}x{height}",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, width * height));
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(c * self.height + y) * self.width + x]
    }

    fn from_dynamic(img: image::DynamicImage, size: Option<usize>) -> Self {
        let img = match size {
            Some(s) if img.width() as usize != s || img.height() as usize != s => {
                img.resize_exact(s as u32, s as u32, image::imageops::FilterType::Triangle)
            }
            _ => img,
        };
        let rgb = img.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut data = vec![0u8; 3 * w * h];
        for (x, y, p) in rgb.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = p[c];
            }
        }
        Self { width: w, height: h, data }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub images: Vec<SourceImage>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// First `n` items (all when `n == 0` or `n >= len`).
    pub fn truncated(mut self, n: usize) -> Self {
        if n > 0 && n < self.images.len() {
            self.images.truncate(n);
            self.labels.truncate(n);
        }
        self
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
}

/// Dataset root: the config value, else `$CGH_DATA_ROOT/<dataset>`.
pub fn resolve_root(cfg: &TrainConfig) -> Option<PathBuf> {
    cfg.data.root.clone().or_else(|| {
        std::env::var_os(DATA_ROOT_ENV).map(|r| PathBuf::from(r).join(cfg.dataset.as_str()))
    })
}

pub fn load_splits(cfg: &TrainConfig) -> Result<Splits> {
    let size = cfg.image_size();
    let splits = match cfg.dataset {
        DatasetId::Synthetic => Splits {
            train: synthetic(
                cfg.data.synthetic_classes,
                cfg.data.synthetic_train_per_class,
                size,
                cfg.seed,
                0,
            ),
            val: synthetic(
                cfg.data.synthetic_classes,
                cfg.data.synthetic_val_per_class,
                size,
                cfg.seed,
                1,
            ),
        },
        other => {
            let root = resolve_root(cfg).ok_or_else(|| {
                CghError::Dataset(format!(
                    "dataset {other} needs data.root or ${DATA_ROOT_ENV}"
                ))
            })?;
            match other {
                DatasetId::Cifar10 => load_cifar(&root, false)?,
                DatasetId::Cifar100 => load_cifar(&root, true)?,
                DatasetId::Stl10 => load_stl10(&root)?,
                DatasetId::TinyImagenet | DatasetId::ImageFolder => Splits {
                    train: load_indexed_folder(&root, "train.txt", Some(size))?,
                    val: load_indexed_folder(&root, "val.txt", Some(size))?,
                },
                DatasetId::Synthetic => unreachable!(),
            }
        }
    };
    let train = splits.train.truncated(cfg.data.max_train);
    if train.is_empty() {
        return Err(CghError::Dataset("training split is empty".into()));
    }
    Ok(Splits { train, val: splits.val })
}

/// Class-conditional procedural textures.
///
/// Each class owns a palette colour, a grating orientation and frequency, and
/// a blob position; instances perturb all of them and add pixel noise, so
/// classes are separable only through a mix of colour, texture and layout.
pub fn synthetic(classes: usize, per_class: usize, size: usize, seed: u64, split: u64) -> Dataset {
    let mut proto_rng = stream(seed, Stream::Dataset, &[u64::MAX]);
    struct Proto {
        color: [f32; 3],
        angle: f32,
        freq: f32,
        blob: (f32, f32),
    }
    let protos: Vec<Proto> = (0..classes)
        .map(|k| Proto {
            color: [
                proto_rng.random_range(0.15..0.85),
                proto_rng.random_range(0.15..0.85),
                proto_rng.random_range(0.15..0.85),
            ],
            angle: std::f32::consts::PI * k as f32 / classes as f32
                + proto_rng.random_range(-0.1..0.1),
            freq: proto_rng.random_range(1.5..5.0),
            blob: (proto_rng.random_range(0.25..0.75), proto_rng.random_range(0.25..0.75)),
        })
        .collect();

    let mut images = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for i in 0..per_class {
        for (k, p) in protos.iter().enumerate() {
            let mut rng = stream(seed, Stream::Dataset, &[split, k as u64, i as u64]);
            let angle = p.angle + rng.random_range(-0.25..0.25f32);
            let freq = p.freq * rng.random_range(0.8..1.25f32);
            let phase = rng.random_range(0.0..std::f32::consts::TAU);
            let (bx, by) = (
                p.blob.0 + rng.random_range(-0.15..0.15f32),
                p.blob.1 + rng.random_range(-0.15..0.15f32),
            );
            let radius = rng.random_range(0.12..0.22f32);
            let gain = rng.random_range(0.7..1.3f32);
            let tint: [f32; 3] = [
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
            ];
            let (ca, sa) = (angle.cos(), angle.sin());
            let mut data = vec![0u8; 3 * size * size];
            for y in 0..size {
                for x in 0..size {
                    let u = x as f32 / size as f32;
                    let v = y as f32 / size as f32;
                    let wave = (std::f32::consts::TAU * freq * (u * ca + v * sa) + phase).sin();
                    let d2 = (u - bx).powi(2) + (v - by).powi(2);
                    let blob = (-d2 / (2.0 * radius * radius)).exp();
                    for c in 0..3 {
                        let noise: f32 = StandardNormal.sample(&mut rng);
                        let base = p.color[c] + tint[c];
                        let val = gain * (base + 0.18 * wave) * (1.0 - 0.5 * blob)
                            + 0.5 * blob * (1.0 - base)
                            + 0.05 * noise;
                        data[(c * size + y) * size + x] = (val.clamp(0.0, 1.0) * 255.0).round() as u8;
                    }
                }
            }
            images.push(SourceImage { width: size, height: size, data });
            labels.push(k);
        }
    }
    Dataset { images, labels, num_classes: classes }
}

const CIFAR_PIXELS: usize = 32 * 32 * 3;

fn parse_cifar_records(bytes: &[u8], label_bytes: usize, fine: bool) -> Result<(Vec<SourceImage>, Vec<usize>)> {
    let rec = label_bytes + CIFAR_PIXELS;
    if bytes.len() % rec != 0 {
        return Err(CghError::Dataset(format!(
            "archive length {} is not a multiple of the record size {rec}",
            bytes.len()
        )));
    }
    let mut images = Vec::with_capacity(bytes.len() / rec);
    let mut labels = Vec::with_capacity(bytes.len() / rec);
    for chunk in bytes.chunks_exact(rec) {
        let label = if fine { chunk[1] } else { chunk[0] };
        labels.push(label as usize);
        images.push(SourceImage {
            width: 32,
            height: 32,
            data: chunk[label_bytes..].to_vec(),
        });
    }
    Ok((images, labels))
}

fn find_file(root: &Path, candidates: &[&str]) -> Option<PathBuf> {
    let dirs = [
        root.to_path_buf(),
        root.join("cifar-10-batches-bin"),
        root.join("cifar-100-binary"),
        root.join("stl10_binary"),
    ];
    for d in &dirs {
        for c in candidates {
            let p = d.join(c);
            if p.is_file() {
                return Some(p);
            }
        }
    }
    None
}

pub fn load_cifar(root: &Path, hundred: bool) -> Result<Splits> {
    let (label_bytes, classes) = if hundred { (2, 100) } else { (1, 10) };
    let train_files: Vec<&str> = if hundred {
        vec!["train.bin"]
    } else {
        vec![
            "data_batch_1.bin",
            "data_batch_2.bin",
            "data_batch_3.bin",
            "data_batch_4.bin",
            "data_batch_5.bin",
        ]
    };
    let mut train = Dataset { num_classes: classes, ..Default::default() };
    for f in train_files {
        let p = find_file(root, &[f])
            .ok_or_else(|| CghError::Dataset(format!("missing {f} under {}", root.display())))?;
        let (imgs, labels) = parse_cifar_records(&fs::read(p)?, label_bytes, hundred)?;
        train.images.extend(imgs);
        train.labels.extend(labels);
    }
    let test = find_file(root, &["test_batch.bin", "test.bin"])
        .ok_or_else(|| CghError::Dataset(format!("missing test archive under {}", root.display())))?;
    let (images, labels) = parse_cifar_records(&fs::read(test)?, label_bytes, hundred)?;
    Ok(Splits {
        train,
        val: Dataset { images, labels, num_classes: classes },
    })
}

fn parse_stl_images(bytes: &[u8]) -> Result<Vec<SourceImage>> {
    const SIDE: usize = 96;
    let rec = 3 * SIDE * SIDE;
    if bytes.len() % rec != 0 {
        return Err(CghError::Dataset("STL-10 image archive has a partial record".into()));
    }
    // Planes are stored column-major.
    Ok(bytes
        .chunks_exact(rec)
        .map(|chunk| {
            let mut data = vec![0u8; rec];
            for c in 0..3 {
                for x in 0..SIDE {
                    for y in 0..SIDE {
                        data[(c * SIDE + y) * SIDE + x] = chunk[(c * SIDE + x) * SIDE + y];
                    }
                }
            }
            SourceImage { width: SIDE, height: SIDE, data }
        })
        .collect())
}

pub fn load_stl10(root: &Path) -> Result<Splits> {
    let load = |xs: &str, ys: &str| -> Result<Dataset> {
        let xp = find_file(root, &[xs]).ok_or_else(|| CghError::Dataset(format!("missing {xs}")))?;
        let yp = find_file(root, &[ys]).ok_or_else(|| CghError::Dataset(format!("missing {ys}")))?;
        let images = parse_stl_images(&fs::read(xp)?)?;
        let labels: Vec<usize> = fs::read(yp)?.iter().map(|&l| l.saturating_sub(1) as usize).collect();
        if labels.len() != images.len() {
            return Err(CghError::Dataset("STL-10 label count does not match image count".into()));
        }
        Ok(Dataset { images, labels, num_classes: 10 })
    };
    Ok(Splits {
        train: load("train_X.bin", "train_y.bin")?,
        val: load("test_X.bin", "test_y.bin")?,
    })
}

/// Loads `<root>/<index>`; each line is `<relative-path> <label>`.
pub fn load_indexed_folder(root: &Path, index: &str, size: Option<usize>) -> Result<Dataset> {
    let index_path = root.join(index);
    let text = fs::read_to_string(&index_path)
        .map_err(|e| CghError::Dataset(format!("{}: {e}", index_path.display())))?;
    let mut ds = Dataset::default();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (path, label) = line
            .rsplit_once(char::is_whitespace)
            .ok_or_else(|| CghError::Dataset(format!("{index}:{}: expected `<path> <label>`", lineno + 1)))?;
        let label: usize = label
            .parse()
            .map_err(|_| CghError::Dataset(format!("{index}:{}: bad label {label:?}", lineno + 1)))?;
        let img = image::open(root.join(path.trim()))
            .map_err(|e| CghError::Dataset(format!("{}: {e}", path.trim())))?;
        ds.images.push(SourceImage::from_dynamic(img, size));
        ds.labels.push(label);
        ds.num_classes = ds.num_classes.max(label + 1);
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = synthetic(4, 3, 16, 9, 0);
        let b = synthetic(4, 3, 16, 9, 0);
        assert_eq!(a.images, b.images);
        assert_eq!(a.len(), 12);
        for k in 0..4 {
            assert_eq!(a.labels.iter().filter(|&&l| l == k).count(), 3);
        }
        let val = synthetic(4, 3, 16, 9, 1);
        assert_ne!(a.images[0], val.images[0]);
    }

    #[test]
    fn cifar_records_parse() {
        let mut bytes = vec![3u8];
        bytes.extend((0..CIFAR_PIXELS).map(|i| (i % 251) as u8));
        bytes.push(7);
        bytes.extend(std::iter::repeat_n(9u8, CIFAR_PIXELS));
        let (imgs, labels) = parse_cifar_records(&bytes, 1, false).unwrap();
        assert_eq!(labels, vec![3, 7]);
        assert_eq!(imgs[0].at(0, 0, 1), 1);
        assert_eq!(imgs[0].at(1, 0, 0), (1024 % 251) as u8);
        assert!(parse_cifar_records(&bytes[1..], 1, false).is_err());
    }

    #[test]
    fn stl_planes_are_transposed() {
        let mut bytes = vec![0u8; 3 * 96 * 96];
        bytes[1] = 200; // channel 0, column 0, row 1
        let imgs = parse_stl_images(&bytes).unwrap();
        assert_eq!(imgs[0].at(0, 1, 0), 200);
    }

    #[test]
    fn indexed_folder_loads_and_resizes() {
        let dir = tempfile::tempdir().unwrap();
        for (i, color) in [[255u8, 0, 0], [0, 0, 255]].iter().enumerate() {
            let img = image::RgbImage::from_pixel(10, 12, image::Rgb(*color));
            img.save(dir.path().join(format!("img{i}.png"))).unwrap();
        }
        fs::write(dir.path().join("train.txt"), "img0.png 0\n# comment\nimg1.png 1\n").unwrap();
        let ds = load_indexed_folder(dir.path(), "train.txt", Some(8)).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.num_classes, 2);
        assert_eq!((ds.images[0].width, ds.images[0].height), (8, 8));
        assert_eq!(ds.images[1].at(2, 4, 4), 255);
        assert_eq!(ds.images[1].at(0, 4, 4), 0);
    }
}
