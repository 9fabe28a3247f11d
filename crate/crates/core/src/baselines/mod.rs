//! Bag-of-words and mean-pool baselines, evaluation metrics, and the
//! subsampled learning-curve harness.

mod bow;
mod curve;
mod linear;
mod meanpool;
mod metrics;

pub use bow::{bow_featurize, SparseVector};
pub use curve::{subsample_curve, subsample_indices, CurveRow, CurveRunner, CurveTable};
pub use linear::{
    train_linear_baseline, train_linear_baseline_with, FeatureRow, LinearModel, LinearOptions,
};
pub use meanpool::{meanpool_baseline, pooled_feature, MeanPoolModel};
pub use metrics::{
    classification_metrics, compute_metrics, regression_metrics, MetricsRecord, Task,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("{predictions} predictions for {truths} truths")]
    LengthMismatch { predictions: usize, truths: usize },
    #[error("{0}")]
    Empty(String),
    #[error("classification and regression targets mixed")]
    MixedTargets,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite gradient while fitting a linear baseline")]
    NonFinite,
    #[error("csv: {0}")]
    Csv(String),
    #[error("curve run failed: {0}")]
    Run(String),
}

impl From<csv::Error> for BaselineError {
    fn from(e: csv::Error) -> Self {
        BaselineError::Csv(e.to_string())
    }
}
