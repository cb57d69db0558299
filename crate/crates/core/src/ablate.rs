//! One-field sweeps over the pretraining config.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::config::{ContextVariant, TrainConfig};
use crate::data::Splits;
use crate::error::{CghError, Result};
use crate::eval::{FeatureKind, DEFAULT_KS};
use crate::pipeline::{knn_eval, Role};
use crate::train::{pretrain, PretrainOptions, TrainState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationField {
    TauH,
    Context,
    LayerSet,
}

impl FromStr for AblationField {
    type Err = CghError;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "tau_h" => Ok(AblationField::TauH),
            "context" | "context_variant" => Ok(AblationField::Context),
            "layer_set" => Ok(AblationField::LayerSet),
            _ => Err(CghError::invalid("field", "must be tau_h, context-variant or layer-set")),
        }
    }
}

impl fmt::Display for AblationField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationField::TauH => "tau_h",
            AblationField::Context => "context",
            AblationField::LayerSet => "layer_set",
        })
    }
}

impl AblationField {
    /// The sweep used when no values are given.
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            AblationField::TauH => &["0.02", "0.04", "0.06", "0.08", "0.1"],
            AblationField::Context => &["global", "same", "cross"],
            AblationField::LayerSet => &["4", "1+4", "2+4", "3+4", "1+2+3+4"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// Applies one sweep value to a copy of `base`.
    pub fn apply(self, base: &TrainConfig, value: &str) -> Result<TrainConfig> {
        let set = match self {
            AblationField::TauH => {
                let v: f64 = value.parse().map_err(|_| CghError::invalid("tau_h", format!("{value} is not a number")))?;
                format!("tau_h={v:?}")
            }
            AblationField::Context => {
                let v: ContextVariant = value.parse()?;
                format!("context=\"{v}\"")
            }
            AblationField::LayerSet => {
                let layers = value
                    .split(['+', ',', ' '])
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<usize>().map_err(|_| CghError::invalid("layer_set", format!("bad block {s}"))))
                    .collect::<Result<Vec<_>>>()?;
                format!("layer_set={layers:?}")
            }
        };
        let mut overrides = vec![set];
        if self == AblationField::Context && value == "global" {
            overrides.push("layer_set=[4]".into());
        }
        TrainConfig::from_toml_with_overrides(&base.to_toml_string(), &overrides)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub value: String,
    pub run_dir: PathBuf,
    pub final_loss: f64,
    pub knn_top1: f64,
    pub knn_k: usize,
}

fn run_one(cfg: &TrainConfig, splits: &Splits, root: &Path, value: &str) -> Result<AblationRow> {
    let out = pretrain(cfg, splits, &PretrainOptions { run_root: root.to_path_buf(), keep_checkpoints: 1, ..Default::default() })?;
    let state = TrainState::load(&out.checkpoint)?;
    let knn = knn_eval(&state, splits, &DEFAULT_KS, FeatureKind::Pooled, Role::Student)?;
    Ok(AblationRow {
        value: value.to_string(),
        run_dir: out.run_dir,
        final_loss: out.metrics.last().map_or(f64::NAN, |m| m.loss),
        knn_top1: knn.best_accuracy,
        knn_k: knn.best_k,
    })
}

/// Pretrains and KNN-evaluates one run per value, each in its own run directory.
pub fn ablate(base: &TrainConfig, field: AblationField, values: &[String], splits: &Splits, root: &Path, parallel: bool) -> Result<Vec<AblationRow>> {
    let cfgs = values.iter().map(|v| field.apply(base, v)).collect::<Result<Vec<_>>>()?;
    if !parallel {
        return cfgs.iter().zip(values).map(|(c, v)| run_one(c, splits, root, v)).collect();
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = cfgs
            .iter()
            .zip(values)
            .map(|(c, v)| scope.spawn(move || run_one(c, splits, root, v)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("ablation worker panicked")).collect()
    })
}

pub fn format_table(field: AblationField, rows: &[AblationRow]) -> String {
    let mut out = format!("{:<12} {:>10} {:>10} {:>6}\n", field.to_string(), "final L", "knn top1", "k");
    for r in rows {
        out.push_str(&format!("{:<12} {:>10.4} {:>10.4} {:>6}\n", r.value, r.final_loss, r.knn_top1 * 100.0, r.knn_k));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{BackboneId, DatasetId};

    #[test]
    fn values_apply() {
        let base = TrainConfig::new(DatasetId::Synthetic, BackboneId::ResnetTiny);
        let c = AblationField::TauH.apply(&base, "0.02").unwrap();
        assert_eq!(c.tau_h, 0.02);
        let c = AblationField::LayerSet.apply(&base, "1+2+4").unwrap();
        assert_eq!(c.layer_set, vec![1, 2, 4]);
        let c = AblationField::Context.apply(&base, "global").unwrap();
        assert_eq!((c.context, c.layer_set.clone()), (ContextVariant::Global, vec![4]));
        assert!(AblationField::LayerSet.apply(&base, "1+2").is_err());
        assert!(AblationField::TauH.apply(&base, "0").is_err());
        assert_eq!("context-variant".parse::<AblationField>().unwrap(), AblationField::Context);
        assert_eq!(AblationField::TauH.default_values().len(), 5);
        assert_eq!(AblationField::Context.default_values().len(), 3);
    }
}
