//! Turns configured files into stage inputs.

use std::path::{Path, PathBuf};

use absa_core::finetune::{sha256_hex, StageData};
use absa_core::text::{
    load_fiqa, load_text_corpus, load_vic, random_split, stratified_split, tokenize,
    AspectHierarchy, DataError, LabelSet, TaskExample, TaskTarget,
};
use serde::Serialize;

use crate::config::{DataConfig, Target};
use crate::error::{CliError, CliResult};

/// An input file and the SHA-256 of its bytes.
#[derive(Clone, Debug, Serialize)]
pub struct InputFile {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

pub fn hash_file(role: &str, path: &Path) -> CliResult<InputFile> {
    let bytes = std::fs::read(path).map_err(|source| {
        CliError::data(DataError::Io {
            path: path.to_path_buf(),
            source,
        })
    })?;
    Ok(InputFile {
        role: role.to_string(),
        path: path.to_path_buf(),
        sha256: sha256_hex(&bytes),
    })
}

fn required<'a>(path: &'a Option<PathBuf>, what: &str) -> CliResult<&'a Path> {
    path.as_deref()
        .ok_or_else(|| CliError::config(format!("data.{what} is not set")))
}

fn is_jsonl(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "json" | "jsonl"))
}

/// Documents for a language-model stage: plain text, one per line, or the
/// `text` field of VIC-style JSON-lines.
fn lm_documents(path: &Path, strict: bool) -> CliResult<Vec<Vec<String>>> {
    let texts = if is_jsonl(path) {
        load_vic(path, strict)?
            .records
            .into_iter()
            .map(|d| d.text)
            .collect()
    } else {
        load_text_corpus(path)?
    };
    Ok(texts.iter().map(|t| tokenize(t)).collect())
}

fn pick<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

pub struct Loaded {
    pub data: StageData,
    pub inputs: Vec<InputFile>,
}

pub fn load_lm(cfg: &DataConfig, seed: u64) -> CliResult<Loaded> {
    let train_path = required(&cfg.train, "train")?;
    let mut inputs = vec![hash_file("train", train_path)?];
    let docs = lm_documents(train_path, cfg.strict)?;
    let (train, valid) = match &cfg.valid {
        Some(p) => {
            inputs.push(hash_file("valid", p)?);
            (docs, lm_documents(p, cfg.strict)?)
        }
        None if cfg.valid_frac == 0.0 => {
            log::warn!("no validation data: validating on the training corpus");
            (docs.clone(), docs)
        }
        None => {
            let s = random_split(docs.len(), cfg.valid_frac, 0.0, seed);
            (pick(&docs, &s.train), pick(&docs, &s.valid))
        }
    };
    Ok(Loaded {
        data: StageData::Lm { train, valid },
        inputs,
    })
}

/// Labelled examples for `target` from one file, plus the declared labels.
pub fn task_examples(
    cfg: &DataConfig,
    target: Target,
    path: &Path,
) -> CliResult<(Vec<TaskExample>, Option<LabelSet>, Vec<InputFile>)> {
    let mut inputs = Vec::new();
    if target == Target::Position {
        let docs = load_vic(path, cfg.strict)?;
        let examples = docs
            .records
            .into_iter()
            .filter_map(|d| {
                d.position.map(|p| TaskExample {
                    tokens: tokenize(&d.text),
                    target: TaskTarget::Class(p.as_str().to_string()),
                })
            })
            .collect();
        let labels = LabelSet::new(["long", "short"])?;
        return Ok((examples, Some(labels), inputs));
    }
    let hpath = required(&cfg.hierarchy, "hierarchy")?;
    inputs.push(hash_file("hierarchy", hpath)?);
    let hierarchy = AspectHierarchy::load(hpath)?;
    let records = load_fiqa(path, &hierarchy, cfg.strict)?.records;
    let examples = records
        .iter()
        .map(|r| TaskExample {
            tokens: r.model_tokens(cfg.field),
            target: match target {
                Target::AspectL1 => TaskTarget::Class(r.aspect_l1.clone()),
                Target::AspectL2 => TaskTarget::Class(r.aspect_l2.clone()),
                _ => TaskTarget::Score(r.sentiment),
            },
        })
        .collect();
    let labels = match target {
        Target::AspectL1 => Some(LabelSet::new(hierarchy.level1_labels())?),
        Target::AspectL2 => Some(LabelSet::new(hierarchy.level2_labels())?),
        _ => None,
    };
    Ok((examples, labels, inputs))
}

pub struct TaskSplit {
    pub train: Vec<TaskExample>,
    pub valid: Vec<TaskExample>,
    pub labels: Option<LabelSet>,
    pub inputs: Vec<InputFile>,
}

impl TaskSplit {
    pub fn stage_data(&self) -> StageData {
        StageData::Task {
            train: self.train.clone(),
            valid: self.valid.clone(),
            labels: self.labels.clone(),
        }
    }
}

pub fn load_task(cfg: &DataConfig, target: Target, seed: u64) -> CliResult<TaskSplit> {
    let train_path = required(&cfg.train, "train")?;
    let mut inputs = vec![hash_file("train", train_path)?];
    let (examples, labels, extra) = task_examples(cfg, target, train_path)?;
    inputs.extend(extra);
    let (train, valid) = match &cfg.valid {
        Some(p) => {
            inputs.push(hash_file("valid", p)?);
            (examples, task_examples(cfg, target, p)?.0)
        }
        None if cfg.valid_frac == 0.0 => {
            log::warn!("no validation data: validating on the training set");
            (examples.clone(), examples)
        }
        None => {
            let split = if target.is_regression() {
                random_split(examples.len(), cfg.valid_frac, 0.0, seed)
            } else {
                let keys: Vec<String> = examples
                    .iter()
                    .map(|e| match &e.target {
                        TaskTarget::Class(c) => c.clone(),
                        TaskTarget::Score(_) => String::new(),
                    })
                    .collect();
                stratified_split(&keys, cfg.valid_frac, 0.0, seed)
            };
            (pick(&examples, &split.train), pick(&examples, &split.valid))
        }
    };
    if train.is_empty() {
        return Err(CliError::data(DataError::InvalidArgument(format!(
            "no {} training examples in {}",
            target.name(),
            train_path.display()
        ))));
    }
    Ok(TaskSplit {
        train,
        valid,
        labels,
        inputs,
    })
}
