use rand::Rng;

use super::EncoderConfig;
use crate::autodiff::Tensor;

/// Explicit dropout masks for one forward pass. Kept entries hold
/// `1 / (1 - p)`, dropped entries 0; `None` means no dropout at that site.
#[derive(Clone, Debug, Default)]
pub struct DropoutMasks {
    /// `[V, E]`, constant along each row: drops whole word vectors.
    pub embed: Option<Tensor>,
    /// Per layer, `[out, 4·out]` mask on the hidden-to-hidden weights.
    pub weight: Vec<Option<Tensor>>,
    /// Per layer, `[B, out]` mask reused at every time step.
    pub variational: Vec<Option<Tensor>>,
}

fn bernoulli<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Vec<f64> {
    if p >= 1.0 {
        return vec![0.0; n];
    }
    let keep = 1.0 / (1.0 - p);
    (0..n)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect()
}

impl DropoutMasks {
    pub fn none(num_layers: usize) -> Self {
        Self {
            embed: None,
            weight: vec![None; num_layers],
            variational: vec![None; num_layers],
        }
    }

    /// Samples every mask for a batch of `batch` sequences. Sites with
    /// probability 0 get no mask.
    pub fn sample<R: Rng + ?Sized>(config: &EncoderConfig, batch: usize, rng: &mut R) -> Self {
        let embed = (config.embed_drop_p > 0.0).then(|| {
            let rows = bernoulli(config.vocab_size, config.embed_drop_p, rng);
            let data = rows
                .iter()
                .flat_map(|&v| std::iter::repeat_n(v, config.embed_dim))
                .collect();
            Tensor::new(vec![config.vocab_size, config.embed_dim], data).expect("mask shape")
        });
        let mut weight = Vec::with_capacity(config.num_layers);
        let mut variational = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let o = config.layer_out(l);
            weight.push((config.weight_drop_p > 0.0).then(|| {
                Tensor::new(
                    vec![o, 4 * o],
                    bernoulli(4 * o * o, config.weight_drop_p, rng),
                )
                .expect("mask shape")
            }));
            variational.push((config.variational_drop_p > 0.0).then(|| {
                Tensor::new(
                    vec![batch, o],
                    bernoulli(batch * o, config.variational_drop_p, rng),
                )
                .expect("mask shape")
            }));
        }
        Self {
            embed,
            weight,
            variational,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.embed.is_none()
            && self.weight.iter().all(Option::is_none)
            && self.variational.iter().all(Option::is_none)
    }
}
