//! Full-catalog ranking metrics, experiment drivers and embedding projection.

mod experiments;
mod metrics;
mod projection;

pub use experiments::{run_ablation, run_noise_robustness, write_table, AblationRow, NoiseRow, Variant};
pub use metrics::{
    evaluate, evaluate_at, evaluate_ranks, metrics_at_k, popularity_ranks, popularity_report, rank_target, EvalReport,
    SplitKind, REPORT_KS,
};
pub use projection::{emit_embedding_projection, write_projection, Projection, ProjectionRow};
