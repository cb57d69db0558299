use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, Array2, Axis};

use crate::augment::eval_view;
use crate::data::Dataset;
use crate::error::{CghError, Result};
use crate::model::{Network, Stats, Weights};
use crate::nn::FeatureMap;

/// Which representation to read out of the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    /// Global average pool of the last block.
    Pooled,
    /// Hypercolumn context vector.
    Hypercolumn,
    /// Unit-norm global projector embedding.
    Projected,
    /// Unit-norm hypercolumn projector embedding.
    ProjectedHyper,
}

impl FeatureKind {
    pub const ALL: &'static [FeatureKind] =
        &[FeatureKind::Pooled, FeatureKind::Hypercolumn, FeatureKind::Projected, FeatureKind::ProjectedHyper];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Pooled => "pooled",
            FeatureKind::Hypercolumn => "hypercolumn",
            FeatureKind::Projected => "projected",
            FeatureKind::ProjectedHyper => "projected-hyper",
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureKind {
    type Err = CghError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(FeatureKind::Pooled),
            other => Self::ALL
                .iter()
                .copied()
                .find(|k| k.as_str() == other)
                .ok_or_else(|| CghError::invalid("feature kind", format!("must be one of pooled, hypercolumn, projected, projected-hyper (got {other})"))),
        }
    }
}

/// One row per image, evaluation views, running batch-norm statistics.
pub fn extract_features(
    net: &Network,
    w: &Weights,
    data: &Dataset,
    kind: FeatureKind,
    mean: [f32; 3],
    std: [f32; 3],
    batch: usize,
) -> Result<Array2<f32>> {
    if data.is_empty() {
        return Err(CghError::Eval("cannot extract features from an empty split".into()));
    }
    if matches!(kind, FeatureKind::Hypercolumn | FeatureKind::ProjectedHyper) && net.hyper.is_none() {
        return Err(CghError::Eval(format!("{kind} features need a hypercolumn head")));
    }
    let mut parts = Vec::new();
    for chunk in data.images.chunks(batch.max(1)) {
        let views = chunk
            .iter()
            .map(|im| eval_view(im, net.image_size, mean, std))
            .collect::<Result<Vec<_>>>()?;
        let x = FeatureMap::from_views(&views.iter().collect::<Vec<_>>());
        let out = match kind {
            FeatureKind::Pooled => net.forward_backbone(w, &x, Stats::Running)?.1,
            FeatureKind::Hypercolumn => net.encode(w, &x, Stats::Running)?.hyper.expect("head present"),
            FeatureKind::Projected => net.embed(w, &x, Stats::Running)?.global,
            FeatureKind::ProjectedHyper => net.embed(w, &x, Stats::Running)?.hyper.expect("head present"),
        };
        parts.push(out);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(concatenate(Axis(0), &views).expect("equal widths"))
}
