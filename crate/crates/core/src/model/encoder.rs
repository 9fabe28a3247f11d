use super::{Bound, DropoutMasks, EncoderConfig, ModelError, SequenceModel};
use crate::autodiff::{Graph, NodeId, Tensor};
use crate::text::IdMatrix;

/// Per-layer `(h, c)` carried between windows, each `[B, out_l]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState {
    pub layers: Vec<(Tensor, Tensor)>,
}

impl EncoderState {
    pub fn zeros(config: &EncoderConfig, batch: usize) -> Self {
        Self {
            layers: (0..config.num_layers)
                .map(|l| {
                    let o = config.layer_out(l);
                    (Tensor::zeros(&[batch, o]), Tensor::zeros(&[batch, o]))
                })
                .collect(),
        }
    }

    pub fn batch(&self) -> usize {
        self.layers.first().map_or(0, |(h, _)| h.rows())
    }

    fn check(&self, config: &EncoderConfig, batch: usize) -> Result<(), ModelError> {
        if self.layers.len() != config.num_layers {
            return Err(ModelError::StateMismatch(format!(
                "{} layers in state, {} in config",
                self.layers.len(),
                config.num_layers
            )));
        }
        for (l, (h, c)) in self.layers.iter().enumerate() {
            let want = [batch, config.layer_out(l)];
            if h.shape() != want || c.shape() != want {
                return Err(ModelError::StateMismatch(format!(
                    "layer {l}: expected {want:?}, got h {:?} c {:?}",
                    h.shape(),
                    c.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Graph nodes produced by one encoder pass.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Top-layer output at each step, `[B, E]`, after variational dropout.
    pub steps: Vec<NodeId>,
    /// Final `(h, c)` per layer.
    pub final_state: Vec<(NodeId, NodeId)>,
}

impl EncoderOutput {
    /// Detached copy of the final state for the next window.
    pub fn state_values(&self, g: &Graph) -> EncoderState {
        EncoderState {
            layers: self
                .final_state
                .iter()
                .map(|&(h, c)| (g.value(h).clone(), g.value(c).clone()))
                .collect(),
        }
    }
}

struct Cell {
    w_ih: NodeId,
    w_hh: NodeId,
    bias: NodeId,
    width: usize,
}

impl Cell {
    /// gates = x·W_ih + h·W_hh + b, split as [input, forget, cell, output].
    fn step(
        &self,
        g: &mut Graph,
        x: NodeId,
        h: NodeId,
        c: NodeId,
    ) -> Result<(NodeId, NodeId), ModelError> {
        let o = self.width;
        let xi = g.matmul(x, self.w_ih)?;
        let hh = g.matmul(h, self.w_hh)?;
        let s = g.add(xi, hh)?;
        let gates = g.add_row(s, self.bias)?;
        let i = g.slice_cols(gates, 0, o)?;
        let f = g.slice_cols(gates, o, o)?;
        let cand = g.slice_cols(gates, 2 * o, o)?;
        let out = g.slice_cols(gates, 3 * o, o)?;
        let i = g.sigmoid(i)?;
        let f = g.sigmoid(f)?;
        let cand = g.tanh(cand)?;
        let out = g.sigmoid(out)?;
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c2 = g.add(keep, write)?;
        let tc = g.tanh(c2)?;
        let h2 = g.mul(out, tc)?;
        Ok((h2, c2))
    }
}

impl SequenceModel {
    /// Runs the stacked LSTM over `ids` (`[B, T]`).
    ///
    /// `valid[t][row] == false` marks padding: at those steps the state of
    /// that row is carried through unchanged. Hidden-to-hidden weights are
    /// multiplied by the weight-drop mask once for the whole pass, and each
    /// layer's variational mask is reused at every step.
    pub fn encode(
        &self,
        g: &mut Graph,
        bound: &Bound,
        ids: &IdMatrix,
        valid: Option<&[Vec<bool>]>,
        state: &EncoderState,
        masks: &DropoutMasks,
    ) -> Result<EncoderOutput, ModelError> {
        let cfg = &self.config;
        let (batch, steps) = (ids.rows(), ids.cols());
        if steps == 0 || batch == 0 {
            return Err(ModelError::EmptySequence);
        }
        state.check(cfg, batch)?;
        if let Some(v) = valid {
            if v.len() != steps || v.iter().any(|r| r.len() != batch) {
                return Err(ModelError::StateMismatch("validity mask shape".into()));
            }
        }

        let mut table = bound.get(0, 0);
        if let Some(m) = &masks.embed {
            table = g.masked(table, m)?;
        }
        let mut inputs = Vec::with_capacity(steps);
        for t in 0..steps {
            inputs.push(g.embedding(table, &ids.column(t))?);
        }

        let mut final_state = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let group = l + 1;
            let mut w_hh = bound.get(group, 1);
            if let Some(m) = masks.weight.get(l).and_then(Option::as_ref) {
                w_hh = g.masked(w_hh, m)?;
            }
            let cell = Cell {
                w_ih: bound.get(group, 0),
                w_hh,
                bias: bound.get(group, 2),
                width: cfg.layer_out(l),
            };
            let (h0, c0) = &state.layers[l];
            let mut h = g.constant(h0.clone());
            let mut c = g.constant(c0.clone());
            let var_mask = masks.variational.get(l).and_then(Option::as_ref);
            let mut outputs = Vec::with_capacity(steps);
            for (t, &x) in inputs.iter().enumerate() {
                let (mut h2, mut c2) = cell.step(g, x, h, c)?;
                if let Some(v) = valid {
                    if v[t].iter().any(|ok| !ok) {
                        h2 = g.blend_rows(h2, h, &v[t])?;
                        c2 = g.blend_rows(c2, c, &v[t])?;
                    }
                }
                h = h2;
                c = c2;
                outputs.push(match var_mask {
                    Some(m) => g.masked(h, m)?,
                    None => h,
                });
            }
            final_state.push((h, c));
            inputs = outputs;
        }
        Ok(EncoderOutput {
            steps: inputs,
            final_state,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::HeadSpec;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Single-layer LSTM written out with plain loops.
    fn textbook(
        emb: &Tensor,
        w_ih: &Tensor,
        w_hh: &Tensor,
        b: &Tensor,
        ids: &[usize],
        recurrent: bool,
    ) -> Vec<Vec<f64>> {
        let o = w_hh.rows();
        let (mut h, mut c) = (vec![0.0; o], vec![0.0; o]);
        let mut out = Vec::new();
        for &id in ids {
            let x = emb.row(id);
            let mut z = b.data().to_vec();
            for (k, zk) in z.iter_mut().enumerate() {
                for (j, xj) in x.iter().enumerate() {
                    *zk += xj * w_ih.at(j, k);
                }
                if recurrent {
                    for (j, hj) in h.iter().enumerate() {
                        *zk += hj * w_hh.at(j, k);
                    }
                }
            }
            for j in 0..o {
                let i = sigmoid(z[j]);
                let f = sigmoid(z[o + j]);
                let gg = z[2 * o + j].tanh();
                let og = sigmoid(z[3 * o + j]);
                c[j] = f * c[j] + i * gg;
                h[j] = og * c[j].tanh();
            }
            out.push(h.clone());
        }
        out
    }

    fn single_layer() -> SequenceModel {
        let cfg = EncoderConfig {
            vocab_size: 10,
            embed_dim: 4,
            hidden_dim: 5,
            num_layers: 1,
            ..EncoderConfig::new(10).without_dropout()
        };
        SequenceModel::new(cfg, HeadSpec::LmDecoder, 11).unwrap()
    }

    fn run(m: &SequenceModel, ids: &[usize], masks: &DropoutMasks) -> Vec<Vec<f64>> {
        let mut g = Graph::new();
        let b = m.bind(&mut g);
        let ids = IdMatrix::new(1, ids.len(), ids.to_vec());
        let state = EncoderState::zeros(m.config(), 1);
        let out = m.encode(&mut g, &b, &ids, None, &state, masks).unwrap();
        out.steps
            .iter()
            .map(|&s| g.value(s).data().to_vec())
            .collect()
    }

    #[test]
    fn matches_textbook_lstm_without_dropout() {
        let m = single_layer();
        let ids = [3, 1, 4, 1, 5];
        let got = run(&m, &ids, &DropoutMasks::none(1));
        let want = textbook(
            m.tensor("embedding.weight").unwrap(),
            m.tensor("lstm_0.w_ih").unwrap(),
            m.tensor("lstm_0.w_hh").unwrap(),
            m.tensor("lstm_0.bias").unwrap(),
            &ids,
            true,
        );
        for (a, b) in got.iter().flatten().zip(want.iter().flatten()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn full_weight_drop_removes_recurrence() {
        let m = single_layer();
        let ids = [2, 7, 7];
        let cfg = EncoderConfig {
            weight_drop_p: 1.0,
            ..m.config().clone()
        };
        let masks = DropoutMasks::sample(&cfg, 1, &mut ChaCha8Rng::seed_from_u64(0));
        let got = run(&m, &ids, &masks);
        let want = textbook(
            m.tensor("embedding.weight").unwrap(),
            m.tensor("lstm_0.w_ih").unwrap(),
            m.tensor("lstm_0.w_hh").unwrap(),
            m.tensor("lstm_0.bias").unwrap(),
            &ids,
            false,
        );
        for (a, b) in got.iter().flatten().zip(want.iter().flatten()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let m = single_layer();
        let a = run(&m, &[1, 2, 3], &DropoutMasks::none(1));
        let b = run(&m, &[1, 2, 3], &DropoutMasks::none(1));
        let bits = |v: &Vec<Vec<f64>>| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn left_padding_does_not_change_the_final_state() {
        let m = single_layer();
        let state = EncoderState::zeros(m.config(), 2);
        let mut g = Graph::new();
        let b = m.bind(&mut g);
        let ids = IdMatrix::from_rows(&[vec![0, 0, 3, 4], vec![1, 2, 3, 4]]);
        let valid: Vec<Vec<bool>> = (0..4).map(|t| vec![t >= 2, true]).collect();
        let out = m
            .encode(
                &mut g,
                &b,
                &ids,
                Some(&valid),
                &state,
                &DropoutMasks::none(1),
            )
            .unwrap();
        let padded = g.value(*out.steps.last().unwrap()).row(0).to_vec();
        let alone = run(&m, &[3, 4], &DropoutMasks::none(1));
        for (a, b) in padded.iter().zip(alone.last().unwrap()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn state_mismatch_is_reported() {
        let m = single_layer();
        let mut g = Graph::new();
        let b = m.bind(&mut g);
        let ids = IdMatrix::new(2, 1, vec![1, 2]);
        let state = EncoderState::zeros(m.config(), 3);
        assert!(matches!(
            m.encode(&mut g, &b, &ids, None, &state, &DropoutMasks::none(1)),
            Err(ModelError::StateMismatch(_))
        ));
    }
}
