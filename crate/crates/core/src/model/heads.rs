use super::{
    Bound, DropoutMasks, EncoderOutput, EncoderState, HeadSpec, ModelError, SequenceModel,
};
use crate::autodiff::{Graph, NodeId, Tensor, TensorError};
use crate::text::{IdMatrix, TargetValue};

/// Output of a task head for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    /// Softmax probabilities over the classes.
    Distribution(Vec<f64>),
    /// Sentiment in (-1, 1).
    Score(f64),
}

impl Prediction {
    pub fn argmax(&self) -> Option<usize> {
        match self {
            Prediction::Distribution(p) => p
                .iter()
                .enumerate()
                .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
                    Some((_, b)) if b >= v => best,
                    _ => Some((i, v)),
                })
                .map(|(i, _)| i),
            Prediction::Score(_) => None,
        }
    }

    pub fn score(&self) -> Option<f64> {
        match self {
            Prediction::Score(s) => Some(*s),
            Prediction::Distribution(_) => None,
        }
    }
}

/// `[h_last; max; mean]` over the valid rows of a `[T, H]` matrix. Padding
/// is on the left, so the valid rows are the last `length`.
pub fn concat_pool(hidden: &Tensor, length: usize) -> Result<Vec<f64>, ModelError> {
    let (t, h) = hidden.dims2().ok_or_else(|| TensorError::InvalidShape {
        shape: hidden.shape().to_vec(),
    })?;
    if length == 0 {
        return Err(ModelError::EmptySequence);
    }
    if length > t {
        return Err(ModelError::Config(format!(
            "length {length} exceeds {t} rows"
        )));
    }
    let rows = (t - length..t).map(|r| hidden.row(r));
    let mut max = vec![f64::NEG_INFINITY; h];
    let mut mean = vec![0.0; h];
    for row in rows {
        for j in 0..h {
            max[j] = max[j].max(row[j]);
            mean[j] += row[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= length as f64);
    let mut out = hidden.row(t - 1).to_vec();
    out.extend(max);
    out.extend(mean);
    Ok(out)
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

impl SequenceModel {
    /// Vocabulary logits for `hidden` (`[N, E]`): `hidden · Eᵀ + b`, with `E`
    /// the raw embedding table when tied.
    pub fn lm_logits(
        &self,
        g: &mut Graph,
        bound: &Bound,
        hidden: NodeId,
    ) -> Result<NodeId, ModelError> {
        if self.head != HeadSpec::LmDecoder {
            return Err(ModelError::WrongHead(format!(
                "lm_logits needs an lm_decoder head, model has {}",
                self.head.kind_name()
            )));
        }
        let head = self.head_group();
        let weight = if self.config.tie_weights {
            bound.get(0, 0)
        } else {
            if self.groups[head].tensors.len() < 2 {
                return Err(ModelError::MissingTensor("head.weight".into()));
            }
            bound.get(head, 1)
        };
        let wt = g.transpose(weight)?;
        let z = g.matmul(hidden, wt)?;
        Ok(g.add_row(z, bound.get(head, 0))?)
    }

    /// Mean next-token cross-entropy over every position of a window.
    /// `targets` is `[B, T]` like the input.
    pub fn lm_loss(
        &self,
        g: &mut Graph,
        bound: &Bound,
        out: &EncoderOutput,
        targets: &IdMatrix,
    ) -> Result<NodeId, ModelError> {
        let stacked = g.concat_rows(&out.steps)?;
        let logits = self.lm_logits(g, bound, stacked)?;
        let flat: Vec<usize> = (0..targets.cols())
            .flat_map(|t| targets.column(t))
            .collect();
        Ok(g.softmax_cross_entropy(logits, &flat)?)
    }

    /// Head output for a padded batch: `[B, n_classes]` logits or `[B, 1]`
    /// scores after tanh.
    ///
    /// When `class_bptt > 0` and the batch is longer, the leading steps run
    /// against a frozen copy of the parameters so gradients only flow
    /// through the last `class_bptt` steps. Pooling still covers every
    /// valid step.
    pub fn task_output(
        &self,
        g: &mut Graph,
        bound: &Bound,
        ids: &IdMatrix,
        valid: &[Vec<bool>],
        masks: &DropoutMasks,
        class_bptt: usize,
    ) -> Result<NodeId, ModelError> {
        let (batch, steps) = (ids.rows(), ids.cols());
        let state = EncoderState::zeros(&self.config, batch);
        let mut all_steps;
        if class_bptt > 0 && steps > class_bptt {
            let split = steps - class_bptt;
            let frozen = self.bind_frozen(g);
            let head_ids = ids.columns(0, split);
            let warm = self.encode(g, &frozen, &head_ids, Some(&valid[..split]), &state, masks)?;
            let carried = warm.state_values(g);
            let tail_ids = ids.columns(split, steps);
            let tail = self.encode(g, bound, &tail_ids, Some(&valid[split..]), &carried, masks)?;
            all_steps = warm.steps;
            all_steps.extend(tail.steps);
        } else {
            all_steps = self
                .encode(g, bound, ids, Some(valid), &state, masks)?
                .steps;
        }
        self.head_forward(g, bound, &all_steps, valid)
    }

    fn head_forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        steps: &[NodeId],
        valid: &[Vec<bool>],
    ) -> Result<NodeId, ModelError> {
        if !self.head.is_pooling() {
            return Err(ModelError::WrongHead(
                "the lm_decoder head has no task output; use lm_logits".into(),
            ));
        }
        // State is carried through padding, so the final step always holds
        // the last valid hidden state of each row.
        let last = *steps.last().ok_or(ModelError::EmptySequence)?;
        let max = g.max_over_time(steps, valid)?;
        let mean = g.mean_over_time(steps, valid)?;
        let pooled = g.concat_cols(&[last, max, mean])?;
        let head = self.head_group();
        let z = g.matmul(pooled, bound.get(head, 0))?;
        let z = g.add_row(z, bound.get(head, 1))?;
        let z = g.relu(z)?;
        let z = g.matmul(z, bound.get(head, 2))?;
        let z = g.add_row(z, bound.get(head, 3))?;
        Ok(match self.head {
            HeadSpec::Regressor { .. } => g.tanh(z)?,
            _ => z,
        })
    }

    /// Cross-entropy for a classifier head, mean squared error for a
    /// regressor.
    pub fn task_loss(
        &self,
        g: &mut Graph,
        output: NodeId,
        targets: &[TargetValue],
    ) -> Result<NodeId, ModelError> {
        match self.head {
            HeadSpec::Classifier { .. } => {
                let ids = targets
                    .iter()
                    .map(|t| match t {
                        TargetValue::Class(c) => Ok(*c),
                        TargetValue::Score(_) => Err(ModelError::WrongHead(
                            "classifier head given a regression target".into(),
                        )),
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(g.softmax_cross_entropy(output, &ids)?)
            }
            HeadSpec::Regressor { .. } => {
                let ys = targets
                    .iter()
                    .map(|t| match t {
                        TargetValue::Score(s) => Ok(*s),
                        TargetValue::Class(_) => Err(ModelError::WrongHead(
                            "regressor head given a class target".into(),
                        )),
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(g.squared_error(output, &ys)?)
            }
            HeadSpec::LmDecoder => Err(ModelError::WrongHead(
                "the lm_decoder head has no task loss; use lm_loss".into(),
            )),
        }
    }

    /// Inference for a padded batch with dropout off.
    pub fn predict_batch(
        &self,
        ids: &IdMatrix,
        valid: &[Vec<bool>],
    ) -> Result<Vec<Prediction>, ModelError> {
        if !self.head.is_pooling() {
            return Err(ModelError::WrongHead(
                "predict needs a classifier or regressor head; use lm_logits for the decoder"
                    .into(),
            ));
        }
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let masks = DropoutMasks::none(self.config.num_layers);
        let out = self.task_output(&mut g, &bound, ids, valid, &masks, 0)?;
        let v = g.value(out);
        Ok((0..v.rows())
            .map(|r| match self.head {
                HeadSpec::Regressor { .. } => Prediction::Score(v.at(r, 0)),
                _ => Prediction::Distribution(softmax(v.row(r))),
            })
            .collect())
    }

    /// Inference on one token id sequence.
    pub fn predict(&self, ids: &[usize]) -> Result<Prediction, ModelError> {
        if ids.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        let m = IdMatrix::new(1, ids.len(), ids.to_vec());
        let valid = vec![vec![true]; ids.len()];
        Ok(self.predict_batch(&m, &valid)?.remove(0))
    }
}
