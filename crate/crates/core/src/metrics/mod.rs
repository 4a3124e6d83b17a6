//! Evaluation metrics, preference projections and record sinks.

mod classification;
mod clustering;
mod report;

pub use classification::{accuracy, weighted_auc, weighted_f1, ClassificationScores};
pub use clustering::{
    adjusted_rand_index, kmeans, preference_cluster_agreement, project_preferences, silhouette,
    KMeansFit,
};
pub use report::{
    groupwise_summary, mean_std, read_metrics_csv, read_projections_csv, write_metrics_csv,
    write_projections_csv, GroupSummary, MetricsRecord, ProjectionDump, ProjectionPoint, Split,
    METRICS_COLUMNS,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty input to {0}")]
    Empty(&'static str),
    #[error("length mismatch in {op}: {left} vs {right}")]
    LengthMismatch {
        op: &'static str,
        left: usize,
        right: usize,
    },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;
