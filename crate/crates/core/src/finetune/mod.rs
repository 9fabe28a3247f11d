//! Learning-rate schedules, unfreezing plans, the stage runner that chains
//! pretraining, LM fine-tuning, and task training, and the checkpoint file
//! that carries weights between stages.

mod checkpoint;
mod schedule;
mod stage;
mod unfreeze;

pub use checkpoint::{Checkpoint, CheckpointError, ProvenanceEntry, FORMAT_VERSION, MAGIC};
pub use schedule::{discriminative_lrs, stlr, Schedule};
pub use stage::{
    evaluate_checkpoint, run_stage, run_stage_observed, sha256_hex, sha256_json, EncoderSettings,
    EpochRecord, PhaseBoundary, PhaseEvent, StageData, StageKind, StageMetrics, StagePlan,
    TrainConfig, VocabConfig, VocabMode,
};
pub use unfreeze::{
    all_at_once_plan, chain_thaw_plan, convergence_check, gradual_unfreeze_plan, Phase, StopRule,
    UnfreezePlan, UnfreezeStrategy,
};

use thiserror::Error;

use crate::autodiff::TensorError;
use crate::baselines::BaselineError;
use crate::model::ModelError;
use crate::text::DataError;

#[derive(Debug, Error)]
pub enum FinetuneError {
    #[error("invalid stage configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error("stage {stage}: non-finite loss {loss} at phase {phase}, epoch {epoch}, step {step} (lr {lr:e}, grad norm {grad_norm})")]
    NonFinite {
        stage: String,
        phase: usize,
        epoch: usize,
        step: usize,
        loss: f64,
        lr: f64,
        grad_norm: f64,
    },
}
