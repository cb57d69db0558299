//! Probes over frozen (or briefly fine-tuned) representations.

mod export;
mod features;
mod knn;
mod linear;
mod pr;
mod semi;

pub use export::{read_embeddings, write_embeddings, EmbeddingFile, EMBEDDING_MAGIC};
pub use features::{extract_features, FeatureKind};
pub use knn::{knn_classify, KnnReport, Voting, DEFAULT_KS, KNN_TEMPERATURE};
pub use linear::{linear_probe, softmax_cross_entropy, LinearClassifier, LinearRecipe, ProbeReport};
pub use pr::{default_thresholds, pr_from_teacher, PrAccumulator, PrCounts, PrRecord, PR_ALPHAS};
pub use semi::{labeled_subset, semi_supervised_finetune, SemiRecipe};
