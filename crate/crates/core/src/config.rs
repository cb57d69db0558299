//! Experiment configuration.
//!
//! Configs are TOML documents carrying a `schema_version` key. Every field
//! except `dataset` and `backbone` has a default; [`load_config`] fills the
//! defaults, applies `key=value` overrides and validates the result.
//!
//! ```toml
//! schema_version = 1
//! dataset = "cifar10"
//! backbone = "resnet18"
//! tau_h = 0.08
//! layer_set = [3, 4]
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CghError, Result};

pub const SCHEMA_VERSION: u32 = 1;

pub const DEFAULT_TAU_S: f64 = 0.1;
pub const DEFAULT_TAU_T: f64 = 0.04;
pub const DEFAULT_TAU_H: f64 = 0.08;
pub const DEFAULT_EMA_MOMENTUM: f64 = 0.999;
pub const DEFAULT_HIDDEN_DIM: usize = 4096;
pub const DEFAULT_EMBED_DIM: usize = 512;

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $key:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $key)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $key),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = CghError;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($key => Ok($name::$variant),)+
                    other => Err(CghError::invalid(
                        stringify!($name),
                        format!("unknown value {other:?}; expected one of {:?}", [$($key),+]),
                    )),
                }
            }
        }
    };
}

string_enum! {
    /// Dataset registry key.
    DatasetId {
        Synthetic => "synthetic",
        Cifar10 => "cifar10",
        Cifar100 => "cifar100",
        Stl10 => "stl10",
        TinyImagenet => "tiny-imagenet",
        ImageFolder => "image-folder",
    }
}

string_enum! {
    /// Backbone registry key. All backbones are residual nets with four stages.
    BackboneId {
        ResnetTiny => "resnet-tiny",
        ResnetSmall => "resnet-small",
        Resnet18 => "resnet18",
    }
}

string_enum! {
    /// Which pair of similarity distributions is aligned.
    ContextVariant {
        Cross => "cross",
        Same => "same",
        Global => "global",
    }
}

string_enum! {
    StemKind {
        Auto => "auto",
        Cifar => "cifar",
        Imagenet => "imagenet",
    }
}

impl DatasetId {
    /// Native image side length.
    pub fn native_size(self) -> usize {
        match self {
            DatasetId::Synthetic | DatasetId::Cifar10 | DatasetId::Cifar100 => 32,
            DatasetId::Stl10 => 96,
            DatasetId::TinyImagenet => 64,
            DatasetId::ImageFolder => 64,
        }
    }

    pub fn default_mean_std(self) -> ([f32; 3], [f32; 3]) {
        match self {
            DatasetId::Cifar10 => ([0.4914, 0.4822, 0.4465], [0.2470, 0.2435, 0.2616]),
            DatasetId::Cifar100 => ([0.5071, 0.4865, 0.4409], [0.2673, 0.2564, 0.2762]),
            DatasetId::Synthetic => ([0.5, 0.5, 0.5], [0.25, 0.25, 0.25]),
            _ => ([0.485, 0.456, 0.406], [0.229, 0.224, 0.225]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root. Falls back to `$CGH_DATA_ROOT/<dataset>` when unset.
    pub root: Option<PathBuf>,
    /// Side length of the square network input; defaults to the dataset's native size.
    pub image_size: Option<usize>,
    /// Synthetic dataset shape.
    pub synthetic_classes: usize,
    pub synthetic_train_per_class: usize,
    pub synthetic_val_per_class: usize,
    /// Caps the number of training images used (0 = all).
    pub max_train: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            image_size: None,
            synthetic_classes: 10,
            synthetic_train_per_class: 100,
            synthetic_val_per_class: 20,
            max_train: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub weak_crop_scale: (f64, f64),
    pub contrastive_crop_scale: (f64, f64),
    pub crop_ratio: (f64, f64),
    pub flip_p: f64,
    pub jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_p: f64,
    /// Gaussian blur probability; `None` enables blur (p = 0.5) only above 96 px.
    pub blur_p: Option<f64>,
    pub blur_sigma: (f64, f64),
    pub mean: Option<[f32; 3]>,
    pub std: Option<[f32; 3]>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            weak_crop_scale: (0.2, 1.0),
            contrastive_crop_scale: (0.2, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            grayscale_p: 0.2,
            blur_p: None,
            blur_sigma: (0.1, 2.0),
            mean: None,
            std: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorConfig {
    /// Run the online KNN monitor every this many epochs (0 disables it).
    pub knn_every: usize,
    pub knn_k: usize,
    /// Number of training images used as the KNN memory (0 = all).
    pub knn_train_samples: usize,
    /// Attach labels to bank entries and record teacher precision/recall per epoch.
    pub pr_analysis: bool,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            knn_every: 0,
            knn_k: 200,
            knn_train_samples: 0,
            pr_analysis: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub dataset: DatasetId,
    pub backbone: BackboneId,
    #[serde(default = "default_stem")]
    pub stem: StemKind,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub base_lr: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_sgd_momentum")]
    pub sgd_momentum: f64,
    #[serde(default)]
    pub warmup_epochs: usize,
    #[serde(default = "default_bank")]
    pub bank_size: usize,
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "default_hyper")]
    pub hyper_dim: usize,
    #[serde(default = "default_tau_s")]
    pub tau_s: f64,
    #[serde(default = "default_tau_t")]
    pub tau_t: f64,
    #[serde(default = "default_tau_h")]
    pub tau_h: f64,
    #[serde(default = "default_ema")]
    pub ema_momentum: f64,
    #[serde(default = "default_layers")]
    pub layer_set: Vec<usize>,
    #[serde(default = "default_context")]
    pub context: ContextVariant,
    #[serde(default)]
    pub use_predictor: bool,
    #[serde(default)]
    pub seed: u64,
    /// Save a checkpoint every this many epochs (the final one is always saved).
    #[serde(default = "default_ckpt_every")]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub monitor: MonitorConfig,
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}
fn default_stem() -> StemKind {
    StemKind::Auto
}
fn default_epochs() -> usize {
    400
}
fn default_batch() -> usize {
    256
}
fn default_lr() -> f64 {
    0.06
}
fn default_wd() -> f64 {
    5e-4
}
fn default_sgd_momentum() -> f64 {
    0.9
}
fn default_bank() -> usize {
    16384
}
fn default_embed() -> usize {
    DEFAULT_EMBED_DIM
}
fn default_hidden() -> usize {
    DEFAULT_HIDDEN_DIM
}
fn default_hyper() -> usize {
    512
}
fn default_tau_s() -> f64 {
    DEFAULT_TAU_S
}
fn default_tau_t() -> f64 {
    DEFAULT_TAU_T
}
fn default_tau_h() -> f64 {
    DEFAULT_TAU_H
}
fn default_ema() -> f64 {
    DEFAULT_EMA_MOMENTUM
}
fn default_layers() -> Vec<usize> {
    vec![3, 4]
}
fn default_context() -> ContextVariant {
    ContextVariant::Cross
}
fn default_ckpt_every() -> usize {
    1
}

impl TrainConfig {
    /// Minimal config with every optional field at its default.
    pub fn new(dataset: DatasetId, backbone: BackboneId) -> Self {
        let doc = format!("dataset = \"{dataset}\"\nbackbone = \"{backbone}\"\n");
        toml::from_str(&doc).expect("defaults deserialize")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parses `text`, applies `key=value` overrides, then validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CghError::ConfigParse(e.to_string()))?;
        for spec in overrides {
            apply_override(&mut table, spec)?;
        }
        let mut cfg: TrainConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CghError::ConfigParse(e.to_string()))?;
        cfg.normalize();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn normalize(&mut self) {
        self.layer_set.sort_unstable();
        self.layer_set.dedup();
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CghError::invalid(
                "schema_version",
                format!("must be {SCHEMA_VERSION}, got {}", self.schema_version),
            ));
        }
        for (name, tau) in [("tau_s", self.tau_s), ("tau_t", self.tau_t), ("tau_h", self.tau_h)] {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(CghError::invalid(name, "must be > 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(CghError::invalid("ema_momentum", "must lie in [0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(CghError::invalid("batch_size", "must be > 0"));
        }
        if self.bank_size <= self.batch_size {
            return Err(CghError::invalid("bank_size", "must be greater than batch_size"));
        }
        if self.layer_set.is_empty() {
            return Err(CghError::invalid("layer_set", "must be nonempty"));
        }
        if let Some(bad) = self.layer_set.iter().find(|&&l| !(1..=4).contains(&l)) {
            return Err(CghError::invalid(
                "layer_set",
                format!("entries must lie in 1..=4, got {bad}"),
            ));
        }
        if !self.layer_set.contains(&4) {
            return Err(CghError::invalid("layer_set", "must contain block 4"));
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("hyper_dim", self.hyper_dim),
        ] {
            if v == 0 {
                return Err(CghError::invalid(name, "must be > 0"));
            }
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(CghError::invalid("base_lr", "must be >= 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(CghError::invalid("weight_decay", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(CghError::invalid("sgd_momentum", "must lie in [0, 1)"));
        }
        if self.warmup_epochs > self.epochs {
            return Err(CghError::invalid("warmup_epochs", "must not exceed epochs"));
        }
        let a = &self.augment;
        for (name, p) in [
            ("augment.flip_p", a.flip_p),
            ("augment.jitter_p", a.jitter_p),
            ("augment.grayscale_p", a.grayscale_p),
            ("augment.blur_p", a.blur_p.unwrap_or(0.0)),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(CghError::invalid(name, "must be a probability in [0, 1]"));
            }
        }
        for (name, (lo, hi)) in [
            ("augment.weak_crop_scale", a.weak_crop_scale),
            ("augment.contrastive_crop_scale", a.contrastive_crop_scale),
        ] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(CghError::invalid(name, "must satisfy 0 < lo <= hi <= 1"));
            }
        }
        if self.image_size() < 8 {
            return Err(CghError::invalid("data.image_size", "must be >= 8"));
        }
        Ok(())
    }

    pub fn image_size(&self) -> usize {
        self.data
            .image_size
            .unwrap_or_else(|| self.dataset.native_size())
    }

    /// The global variant never uses the hypercolumn branch.
    pub fn uses_hypercolumn(&self) -> bool {
        self.context != ContextVariant::Global
    }

    pub fn effective_layer_set(&self) -> Vec<usize> {
        if self.uses_hypercolumn() {
            self.layer_set.clone()
        } else {
            vec![4]
        }
    }

    pub fn blur_p(&self) -> f64 {
        self.augment
            .blur_p
            .unwrap_or(if self.image_size() > 96 { 0.5 } else { 0.0 })
    }

    pub fn mean_std(&self) -> ([f32; 3], [f32; 3]) {
        let (m, s) = self.dataset.default_mean_std();
        (self.augment.mean.unwrap_or(m), self.augment.std.unwrap_or(s))
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        hex::encode(digest)
    }
}

/// Reads, defaults and validates a config file.
pub fn load_config(path: &Path) -> Result<TrainConfig> {
    load_config_with_overrides(path, &[])
}

pub fn load_config_with_overrides(path: &Path, overrides: &[String]) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)?;
    TrainConfig::from_toml_with_overrides(&text, overrides)
}

/// Applies one `a.b.c=value` override. The value is parsed as a TOML value
/// and falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CghError::ConfigParse(format!("override {spec:?} is not key=value")))?;
    let key = key.trim().replace('-', "_");
    let raw = raw.trim();
    let value = parse_override_value(raw);
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| {
        CghError::ConfigParse(format!("override {spec:?} has an empty key"))
    })?;
    let mut cur = table;
    for part in parts {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            CghError::ConfigParse(format!("override key {key:?}: {part:?} is not a table"))
        })?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "dataset = \"tiny-imagenet\"\nbackbone = \"resnet18\"\n";

    #[test]
    fn minimal_file_gets_defaults() {
        let cfg = TrainConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.tau_h, 0.08);
        assert_eq!(cfg.tau_t, 0.04);
        assert_eq!(cfg.tau_s, 0.1);
        assert_eq!(cfg.ema_momentum, 0.999);
        assert_eq!(cfg.hidden_dim, 4096);
        assert_eq!(cfg.embed_dim, 512);
        assert_eq!(cfg.base_lr, 0.06);
        assert_eq!(cfg.weight_decay, 5e-4);
        assert_eq!(cfg.batch_size, 256);
        assert_eq!(cfg.layer_set, vec![3, 4]);
        assert_eq!(cfg.context, ContextVariant::Cross);
    }

    #[test]
    fn zero_tau_h_is_rejected() {
        let err = TrainConfig::from_toml_str(&format!("{MINIMAL}tau_h = 0.0\n")).unwrap_err();
        assert_eq!(err.to_string(), "tau_h must be > 0");
    }

    #[test]
    fn layer_set_without_block_four_is_rejected() {
        let err = TrainConfig::from_toml_str(&format!("{MINIMAL}layer_set = [1, 2]\n")).unwrap_err();
        assert_eq!(err.to_string(), "layer_set must contain block 4");
    }

    #[test]
    fn bank_must_exceed_batch() {
        let err = TrainConfig::from_toml_str(&format!("{MINIMAL}bank_size = 256\n")).unwrap_err();
        assert!(err.to_string().starts_with("bank_size"));
    }

    #[test]
    fn ema_out_of_range() {
        let err = TrainConfig::from_toml_str(&format!("{MINIMAL}ema_momentum = 1.5\n")).unwrap_err();
        assert!(err.to_string().starts_with("ema_momentum"));
    }

    #[test]
    fn unknown_field_is_a_parse_error() {
        let err = TrainConfig::from_toml_str(&format!("{MINIMAL}tau_x = 1.0\n")).unwrap_err();
        assert!(matches!(err, CghError::ConfigParse(_)));
    }

    #[test]
    fn missing_backbone_is_a_parse_error() {
        assert!(TrainConfig::from_toml_str("dataset = \"cifar10\"\n").is_err());
    }

    #[test]
    fn overrides_apply_before_validation() {
        let cfg = TrainConfig::from_toml_with_overrides(
            MINIMAL,
            &[
                "tau_h=0.02".into(),
                "layer-set=[4, 1, 2]".into(),
                "context=same".into(),
                "augment.blur_p=0.25".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.tau_h, 0.02);
        assert_eq!(cfg.layer_set, vec![1, 2, 4]);
        assert_eq!(cfg.context, ContextVariant::Same);
        assert_eq!(cfg.augment.blur_p, Some(0.25));

        let err = TrainConfig::from_toml_with_overrides(MINIMAL, &["tau_s=-1".into()]).unwrap_err();
        assert_eq!(err.to_string(), "tau_s must be > 0");
    }

    #[test]
    fn global_variant_ignores_layer_set() {
        let cfg =
            TrainConfig::from_toml_str(&format!("{MINIMAL}context = \"global\"\nlayer_set = [1, 2, 3, 4]\n"))
                .unwrap();
        assert!(!cfg.uses_hypercolumn());
        assert_eq!(cfg.effective_layer_set(), vec![4]);
    }

    #[test]
    fn blur_defaults_depend_on_resolution() {
        let small = TrainConfig::new(DatasetId::Cifar10, BackboneId::ResnetTiny);
        assert_eq!(small.blur_p(), 0.0);
        let mut large = small.clone();
        large.data.image_size = Some(128);
        assert_eq!(large.blur_p(), 0.5);
    }

    #[test]
    fn enum_keys_round_trip() {
        for &d in DatasetId::ALL {
            assert_eq!(d.as_str().parse::<DatasetId>().unwrap(), d);
        }
        for &v in ContextVariant::ALL {
            assert_eq!(v.as_str().parse::<ContextVariant>().unwrap(), v);
        }
        assert!("resnet50".parse::<BackboneId>().is_err());
    }
}
