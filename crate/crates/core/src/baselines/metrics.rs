use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::BaselineError;
use crate::text::TargetValue;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classify,
    Regress,
}

/// Evaluation summary. Classification fields are `None` for regression and
/// the other way round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub task: Task,
    pub n_examples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1_macro: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1_micro: Option<f64>,
    /// `(label, f1)` for every class seen in truths or predictions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class_f1: Option<Vec<(String, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        serialize_with = "ser_r2",
        deserialize_with = "de_r2"
    )]
    pub r2: Option<f64>,
}

// JSON has no infinities; a constant-truth set with nonzero residuals has
// r2 = -inf and is written as the string "-inf".
fn ser_r2<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(x) if x.is_infinite() => s.serialize_str("-inf"),
        Some(x) => s.serialize_f64(*x),
        None => s.serialize_none(),
    }
}

fn de_r2<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    match Option::<Raw>::deserialize(d)? {
        None => Ok(None),
        Some(Raw::Num(x)) => Ok(Some(x)),
        Some(Raw::Text(t)) if t == "-inf" => Ok(Some(f64::NEG_INFINITY)),
        Some(Raw::Text(t)) => Err(serde::de::Error::custom(format!("bad r2 value {t:?}"))),
    }
}

impl MetricsRecord {
    /// Named scalar values in a fixed order, for tables.
    pub fn scalars(&self) -> Vec<(&'static str, f64)> {
        [
            ("error_rate", self.error_rate),
            ("f1_macro", self.f1_macro),
            ("f1_micro", self.f1_micro),
            ("mse", self.mse),
            ("r2", self.r2),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.scalars()
            .into_iter()
            .find(|(k, _)| *k == name)
            .map(|(_, v)| v)
    }
}

fn check_lengths(p: usize, t: usize) -> Result<(), BaselineError> {
    if p != t {
        return Err(BaselineError::LengthMismatch {
            predictions: p,
            truths: t,
        });
    }
    if t == 0 {
        return Err(BaselineError::Empty(
            "metrics need at least one example".into(),
        ));
    }
    Ok(())
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let p = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let r = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Error rate and F1 scores. `labels` names class indices in the per-class
/// list; unnamed classes are shown by index.
pub fn classification_metrics(
    predictions: &[usize],
    truths: &[usize],
    labels: Option<&[String]>,
) -> Result<MetricsRecord, BaselineError> {
    check_lengths(predictions.len(), truths.len())?;
    let k = predictions.iter().chain(truths).max().map_or(0, |m| m + 1);
    let (mut tp, mut fp, mut fn_) = (vec![0usize; k], vec![0usize; k], vec![0usize; k]);
    let mut seen_truth = vec![false; k];
    let mut seen_any = vec![false; k];
    for (&p, &t) in predictions.iter().zip(truths) {
        seen_truth[t] = true;
        seen_any[t] = true;
        seen_any[p] = true;
        if p == t {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let n = truths.len();
    let wrong: usize = fp.iter().sum();
    let mut per_class = Vec::new();
    let (mut macro_sum, mut macro_n) = (0.0, 0usize);
    for c in 0..k {
        if !seen_any[c] {
            continue;
        }
        let score = f1(tp[c], fp[c], fn_[c]);
        if seen_truth[c] {
            macro_sum += score;
            macro_n += 1;
        }
        let name = labels
            .and_then(|l| l.get(c).cloned())
            .unwrap_or_else(|| c.to_string());
        per_class.push((name, score));
    }
    let (tp_all, fp_all, fn_all) = (tp.iter().sum(), fp.iter().sum(), fn_.iter().sum());
    Ok(MetricsRecord {
        task: Task::Classify,
        n_examples: n,
        error_rate: Some(wrong as f64 / n as f64),
        f1_macro: Some(macro_sum / macro_n as f64),
        f1_micro: Some(f1(tp_all, fp_all, fn_all)),
        per_class_f1: Some(per_class),
        mse: None,
        r2: None,
    })
}

/// Mean squared error and R². When every truth is equal, R² is 0 for a
/// perfect fit and -inf otherwise.
pub fn regression_metrics(
    predictions: &[f64],
    truths: &[f64],
) -> Result<MetricsRecord, BaselineError> {
    check_lengths(predictions.len(), truths.len())?;
    let n = truths.len() as f64;
    let mean = truths.iter().sum::<f64>() / n;
    let ss_res: f64 = predictions
        .iter()
        .zip(truths)
        .map(|(p, t)| (t - p) * (t - p))
        .sum();
    let ss_tot: f64 = truths.iter().map(|t| (t - mean) * (t - mean)).sum();
    let r2 = if ss_tot == 0.0 {
        if ss_res == 0.0 {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(MetricsRecord {
        task: Task::Regress,
        n_examples: truths.len(),
        error_rate: None,
        f1_macro: None,
        f1_micro: None,
        per_class_f1: None,
        mse: Some(ss_res / n),
        r2: Some(r2),
    })
}

/// Dispatches on the kind of target; predictions and truths must agree.
pub fn compute_metrics(
    predictions: &[TargetValue],
    truths: &[TargetValue],
    labels: Option<&[String]>,
) -> Result<MetricsRecord, BaselineError> {
    check_lengths(predictions.len(), truths.len())?;
    match truths[0] {
        TargetValue::Class(_) => {
            let mut p = Vec::with_capacity(predictions.len());
            let mut t = Vec::with_capacity(truths.len());
            for (a, b) in predictions.iter().zip(truths) {
                match (a, b) {
                    (TargetValue::Class(a), TargetValue::Class(b)) => {
                        p.push(*a);
                        t.push(*b);
                    }
                    _ => return Err(BaselineError::MixedTargets),
                }
            }
            classification_metrics(&p, &t, labels)
        }
        TargetValue::Score(_) => {
            let mut p = Vec::with_capacity(predictions.len());
            let mut t = Vec::with_capacity(truths.len());
            for (a, b) in predictions.iter().zip(truths) {
                match (a, b) {
                    (TargetValue::Score(a), TargetValue::Score(b)) => {
                        p.push(*a);
                        t.push(*b);
                    }
                    _ => return Err(BaselineError::MixedTargets),
                }
            }
            regression_metrics(&p, &t)
        }
    }
}
