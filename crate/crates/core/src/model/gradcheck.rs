use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{DropoutMasks, EncoderConfig, EncoderState, HeadSpec, ModelError, SequenceModel};
use crate::autodiff::{relative_error, Graph, NodeId, Tensor, TensorError};
use crate::text::IdMatrix;

/// Outcome of a finite-difference check over every encoder parameter.
#[derive(Clone, Debug, Serialize)]
pub struct EncoderCheck {
    pub seed: u64,
    pub coordinates: usize,
    pub max_relative_error: f64,
    /// Analytic and numeric values at the worst coordinate.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub max_abs_error: f64,
    /// Coordinates whose relative error reaches `tolerance`.
    pub over_tolerance: usize,
}

/// The tiny configuration used for full-model checks: vocab 20, embed 8,
/// hidden 12, two layers, no dropout.
pub fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        embed_dim: 8,
        hidden_dim: 12,
        num_layers: 2,
        ..EncoderConfig::new(20)
    }
    .without_dropout()
}

/// Scalar loss on the final `(h, c)` of every layer: a fixed random
/// weighting, so every state coordinate contributes with its own sign.
fn final_state_loss(
    model: &SequenceModel,
    g: &mut Graph,
    nodes: &[NodeId],
    ids: &IdMatrix,
    weights: &[(Tensor, Tensor)],
) -> Result<NodeId, ModelError> {
    let bound = model.bound_from(nodes);
    let state = EncoderState::zeros(model.config(), ids.rows());
    let masks = DropoutMasks::none(model.config().num_layers);
    let out = model.encode(g, &bound, ids, None, &state, &masks)?;
    let mut total: Option<NodeId> = None;
    for ((h, c), (wh, wc)) in out.final_state.iter().zip(weights) {
        for (node, w) in [(*h, wh), (*c, wc)] {
            let w = g.constant(w.clone());
            let p = g.mul(node, w)?;
            let s = g.sum(p)?;
            total = Some(match total {
                Some(t) => g.add(t, s)?,
                None => s,
            });
        }
    }
    total.ok_or_else(|| ModelError::Config("encoder has no layers".into()))
}

/// Checks analytic gradients of every encoder tensor (embedding and all
/// LSTM layers) against central differences with step `eps`.
pub fn encoder_gradient_check(
    seed: u64,
    eps: f64,
    tolerance: f64,
) -> Result<EncoderCheck, ModelError> {
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(
            TensorError::InvalidArgument(format!("eps must lie in (0, 1e-3], got {eps}")).into(),
        );
    }
    let config = tiny_config();
    let model = SequenceModel::new(config.clone(), HeadSpec::LmDecoder, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    let (batch, len) = (2, 5);
    let ids = IdMatrix::new(
        batch,
        len,
        (0..batch * len)
            .map(|_| rng.gen_range(0..config.vocab_size))
            .collect(),
    );
    let weights: Vec<(Tensor, Tensor)> = (0..config.num_layers)
        .map(|l| {
            let shape = [batch, config.layer_out(l)];
            (
                Tensor::uniform(&shape, 1.0, &mut rng),
                Tensor::uniform(&shape, 1.0, &mut rng),
            )
        })
        .collect();
    let inputs: Vec<Tensor> = model.groups()[..model.head_group()]
        .iter()
        .flat_map(|g| &g.tensors)
        .map(|p| p.value.clone())
        .collect();

    let mut g = Graph::new();
    let nodes: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = final_state_loss(&model, &mut g, &nodes, &ids, &weights)?;
    g.backward(loss)?;
    let grads: Vec<Tensor> = nodes
        .iter()
        .zip(&inputs)
        .map(|(n, t)| {
            g.grad(*n)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let value = |xs: &[Tensor]| -> Result<f64, ModelError> {
        let mut g = Graph::new();
        let nodes: Vec<NodeId> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = final_state_loss(&model, &mut g, &nodes, &ids, &weights)?;
        Ok(g.value(loss).item())
    };

    let mut report = EncoderCheck {
        seed,
        coordinates: 0,
        max_relative_error: 0.0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        max_abs_error: 0.0,
        over_tolerance: 0,
    };
    let mut xs = inputs.clone();
    for (i, grad) in grads.iter().enumerate() {
        for k in 0..xs[i].numel() {
            let x0 = inputs[i].data()[k];
            xs[i].data_mut()[k] = x0 + eps;
            let plus = value(&xs)?;
            xs[i].data_mut()[k] = x0 - eps;
            let minus = value(&xs)?;
            xs[i].data_mut()[k] = x0;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grad.data()[k];
            let rel = relative_error(analytic, numeric);
            report.coordinates += 1;
            report.max_abs_error = report.max_abs_error.max((analytic - numeric).abs());
            if rel >= tolerance {
                report.over_tolerance += 1;
            }
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst_analytic = analytic;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
