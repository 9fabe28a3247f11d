use serde::{Deserialize, Serialize};

use super::{train_linear_baseline, BaselineError, LinearModel, Task};
use crate::autodiff::Tensor;
use crate::text::TargetValue;

/// Mean of the table rows picked by `ids`.
pub fn pooled_feature(table: &Tensor, ids: &[usize]) -> Result<Vec<f64>, BaselineError> {
    let (rows, width) = table
        .dims2()
        .ok_or_else(|| BaselineError::InvalidArgument("embedding table must be 2-D".into()))?;
    if ids.is_empty() {
        return Err(BaselineError::Empty("cannot pool an empty sequence".into()));
    }
    let mut out = vec![0.0; width];
    for &id in ids {
        if id >= rows {
            return Err(BaselineError::InvalidArgument(format!(
                "token id {id} outside table of {rows} rows"
            )));
        }
        for (o, v) in out.iter_mut().zip(table.row(id)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= ids.len() as f64);
    Ok(out)
}

/// Frozen embedding table, mean pooling, then one trained dense layer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeanPoolModel {
    pub dense: LinearModel,
    /// Fingerprint of the table the dense layer was trained against.
    pub table_fingerprint: String,
}

impl MeanPoolModel {
    pub fn predict(&self, table: &Tensor, ids: &[usize]) -> Result<TargetValue, BaselineError> {
        Ok(self.dense.predict(&pooled_feature(table, ids)?))
    }
}

/// Trains the dense layer over pooled features; `table` is only read.
pub fn meanpool_baseline(
    table: &Tensor,
    sequences: &[Vec<usize>],
    labels: &[TargetValue],
    task: Task,
    l2: f64,
) -> Result<MeanPoolModel, BaselineError> {
    let feats = sequences
        .iter()
        .map(|s| pooled_feature(table, s))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MeanPoolModel {
        dense: train_linear_baseline(&feats, labels, task, l2)?,
        table_fingerprint: table.fingerprint(),
    })
}
