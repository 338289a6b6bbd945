//! Metrics, evaluation protocols, ablation grid and embedding export.

pub mod ablate;
pub mod embed;
pub mod metrics;
pub mod protocols;

pub use ablate::{ablate, AblationCell, AblationRun, AblationTable};
pub use embed::{export_embeddings, read_embeddings, Pca};
pub use metrics::{ap, auc, eer, group_auc, group_scores};
pub use protocols::{
    auc_drops, evaluate_domains, evaluate_held_out, evaluate_training_domains, robustness_sweep, Level, MetricsReport,
};
