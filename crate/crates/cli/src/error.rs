use std::fmt;

use absa_core::autodiff::TensorError;
use absa_core::baselines::BaselineError;
use absa_core::finetune::{CheckpointError, FinetuneError};
use absa_core::model::ModelError;
use absa_core::text::DataError;

pub const EXIT_INTERNAL: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

/// An error together with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub error: anyhow::Error,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }

    pub fn config(msg: impl fmt::Display) -> Self {
        Self::new(EXIT_CONFIG, anyhow::anyhow!("{msg}"))
    }

    pub fn data(e: impl Into<anyhow::Error>) -> Self {
        Self::new(EXIT_DATA, e)
    }

    pub fn numerical(msg: impl fmt::Display) -> Self {
        Self::new(EXIT_NUMERICAL, anyhow::anyhow!("{msg}"))
    }

    pub fn internal(e: impl Into<anyhow::Error>) -> Self {
        Self::new(EXIT_INTERNAL, e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Several core errors already print their source inline; skip a
        // cause whose text the message so far already ends with.
        let mut text = self.error.to_string();
        for cause in self.error.chain().skip(1) {
            let c = cause.to_string();
            if !text.ends_with(&c) {
                text.push_str(": ");
                text.push_str(&c);
            }
        }
        f.write_str(&text)
    }
}

fn tensor_code(e: &TensorError) -> u8 {
    match e {
        TensorError::NonFinite { .. } => EXIT_NUMERICAL,
        _ => EXIT_INTERNAL,
    }
}

fn model_code(e: &ModelError) -> u8 {
    match e {
        ModelError::Tensor(t) => tensor_code(t),
        ModelError::Config(_) | ModelError::WrongHead(_) => EXIT_CONFIG,
        // A checkpoint whose tensors do not fit its own metadata.
        ModelError::MissingTensor(_) | ModelError::StateMismatch(_) => EXIT_DATA,
        ModelError::EmptySequence => EXIT_DATA,
    }
}

pub fn finetune_code(e: &FinetuneError) -> u8 {
    match e {
        FinetuneError::Config(_) => EXIT_CONFIG,
        FinetuneError::Data(_) | FinetuneError::Checkpoint(_) => EXIT_DATA,
        FinetuneError::Model(m) => model_code(m),
        FinetuneError::Tensor(t) => tensor_code(t),
        FinetuneError::Baseline(BaselineError::NonFinite) => EXIT_NUMERICAL,
        FinetuneError::Baseline(_) => EXIT_DATA,
        FinetuneError::NonFinite { .. } => EXIT_NUMERICAL,
    }
}

impl From<FinetuneError> for CliError {
    fn from(e: FinetuneError) -> Self {
        Self::new(finetune_code(&e), e)
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        Self::data(e)
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        Self::data(e)
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        Self::new(model_code(&e), e)
    }
}

impl From<BaselineError> for CliError {
    fn from(e: BaselineError) -> Self {
        let code = match e {
            BaselineError::NonFinite => EXIT_NUMERICAL,
            BaselineError::Csv(_) => EXIT_INTERNAL,
            _ => EXIT_DATA,
        };
        Self::new(code, e)
    }
}
