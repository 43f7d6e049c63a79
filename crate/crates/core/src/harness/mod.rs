//! Evaluation harness: leave-one-subject-out folds, fold training,
//! cross-validation summaries, ablations, and numeric gradient checks.

pub mod ablate;
pub mod dataset;
pub mod folds;
pub mod gradcheck;
pub mod loso;
pub mod metrics;
#[cfg(test)]
pub(crate) mod testutil;
pub mod train;

pub use ablate::{run_ablation, AblationSummary, Variant};
pub use dataset::{load_feature_set, FeatureSet};
pub use folds::{loso_folds, FoldSpec};
pub use gradcheck::{grad_check, GradCheckReport};
pub use loso::{evaluate, run_loso, write_results, FoldResult, LosoSummary};
pub use metrics::{confusion_matrix, mean_std, metrics_from_confusion, plain_accuracy, Metrics};
pub use train::{train_fold, EpochRecord, StepLog, StepPhase, TrainHistory, TrainedFold};

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("fold construction failed: {0}")]
    Fold(String),
    #[error("dataset rejected: {0}")]
    Dataset(String),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Feature(#[from] crate::features::FeatureError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error("training diverged on fold {held_out_subject} at epoch {epoch}: {detail}")]
    Divergence { held_out_subject: usize, epoch: usize, detail: String },
    #[error("writing {path} failed")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
