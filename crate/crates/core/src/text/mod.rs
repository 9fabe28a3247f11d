//! Tokenization, vocabularies, embedding transfer, batching, and dataset
//! loaders for FiQA-style labelled sentences and VIC-style write-ups.

mod batch;
mod embed;
mod fiqa;
mod split;
mod tokenize;
mod vic;
mod vocab;

pub use batch::{
    classification_batches, lm_batches, IdMatrix, LabelSet, LmBatch, LmBatchStream, PadPolicy,
    SeqBatch, TargetValue, TaskExample, TaskTarget,
};
pub use embed::transfer_embeddings;
pub use fiqa::{
    load_fiqa, parse_fiqa, AspectHierarchy, InputField, LabeledExample, ASPECT_L1_LABELS,
};
pub use split::{random_split, stratified_split, Split};
pub use tokenize::tokenize;
pub use vic::{load_text_corpus, load_vic, parse_vic, CorpusDocument, Position};
pub use vocab::{Vocabulary, BOS, EOS, NUM_RESERVED, PAD, UNK};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("record {index}: {reason}")]
    Validation { index: usize, reason: String },
    #[error("unknown label {label:?}; declared labels: {declared:?}")]
    UnknownLabel {
        label: String,
        declared: Vec<String>,
    },
    #[error("sequence of {len} tokens is too short for {batch_size} lanes")]
    SequenceTooShort { len: usize, batch_size: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl DataError {
    pub(crate) fn invalid(index: usize, reason: impl Into<String>) -> Self {
        DataError::Validation {
            index,
            reason: reason.into(),
        }
    }
}

/// Records accepted by a loader plus what was dropped on the way.
#[derive(Debug, Clone)]
pub struct Loaded<T> {
    pub records: Vec<T>,
    /// `(record index, reason)` for every record skipped in non-strict mode.
    pub skipped: Vec<(usize, String)>,
    /// Extra aspect pairs discarded from multilabel records.
    pub multilabel_dropped: usize,
}

impl<T> Default for Loaded<T> {
    fn default() -> Self {
        Self {
            records: Vec::new(),
            skipped: Vec::new(),
            multilabel_dropped: 0,
        }
    }
}

pub(crate) fn read_file(path: &std::path::Path) -> Result<String, DataError> {
    std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Splits a file into JSON records: a top-level array, or one object per
/// non-blank line.
pub(crate) fn json_records(
    text: &str,
) -> Result<Vec<Result<serde_json::Value, String>>, DataError> {
    let trimmed = text.trim_start();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    if trimmed.starts_with('[') {
        let v: serde_json::Value = serde_json::from_str(trimmed)
            .map_err(|e| DataError::invalid(0, format!("malformed JSON array: {e}")))?;
        let arr = v.as_array().cloned().unwrap_or_default();
        return Ok(arr.into_iter().map(Ok).collect());
    }
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| format!("malformed JSON: {e}")))
        .collect())
}
