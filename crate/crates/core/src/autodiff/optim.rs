use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Tensor, TensorError};

pub const DEFAULT_CLIP_NORM: f64 = 0.25;

/// A named parameter and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
            grad: None,
        }
    }

    pub fn accumulate_grad(&mut self, g: &Tensor) -> Result<(), TensorError> {
        if g.shape() != self.value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "accumulate_grad",
                lhs: self.value.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        match &mut self.grad {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.clone()),
        }
        Ok(())
    }
}

/// Unit of freezing and of learning-rate assignment.
#[derive(Clone, Debug)]
pub struct ParameterGroup {
    pub name: String,
    pub tensors: Vec<Param>,
    pub trainable: bool,
    pub lr_scale: f64,
}

impl ParameterGroup {
    pub fn new(name: impl Into<String>, tensors: Vec<Param>) -> Self {
        Self {
            name: name.into(),
            tensors,
            trainable: true,
            lr_scale: 1.0,
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.tensors {
            p.grad = None;
        }
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|p| p.value.numel()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Buffers {
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

/// Auxiliary buffers keyed by (group, tensor) position.
///
/// Adam bias correction uses a per-tensor step count so a group thawed late
/// starts with a correctly scaled first update.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    kind: OptimizerKind,
    buffers: BTreeMap<(usize, usize), Buffers>,
    step_count: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            buffers: BTreeMap::new(),
            step_count: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update. `lrs[g]` is the learning rate of group `g`; the
    /// group's `lr_scale` multiplies it. Frozen groups are skipped entirely.
    pub fn step(&mut self, groups: &mut [ParameterGroup], lrs: &[f64]) -> Result<(), TensorError> {
        if lrs.len() != groups.len() {
            return Err(TensorError::InvalidArgument(format!(
                "{} learning rates for {} groups",
                lrs.len(),
                groups.len()
            )));
        }
        for (group, &lr) in groups.iter().zip(lrs) {
            if !group.trainable {
                continue;
            }
            if !(lr.is_finite() && lr > 0.0) {
                return Err(TensorError::InvalidArgument(format!(
                    "learning rate for group {} must be positive, got {lr}",
                    group.name
                )));
            }
            for p in &group.tensors {
                if p.grad.is_none() {
                    return Err(TensorError::MissingGradient {
                        name: p.name.clone(),
                    });
                }
            }
        }
        for (g, (group, &lr)) in groups.iter_mut().zip(lrs).enumerate() {
            if !group.trainable {
                continue;
            }
            let eff = lr * group.lr_scale;
            for (i, p) in group.tensors.iter_mut().enumerate() {
                let grad = p.grad.as_ref().expect("checked above").data();
                let n = grad.len();
                let buf = self.buffers.entry((g, i)).or_insert_with(|| Buffers {
                    first: vec![0.0; n],
                    second: vec![0.0; n],
                    steps: 0,
                });
                buf.steps += 1;
                match self.kind {
                    OptimizerKind::SgdMomentum { momentum } => {
                        for (m, gr) in buf.first.iter_mut().zip(grad) {
                            *m = momentum * *m + gr;
                        }
                        if eff != 0.0 {
                            for (w, m) in p.value.data_mut().iter_mut().zip(&buf.first) {
                                *w -= eff * m;
                            }
                        }
                    }
                    OptimizerKind::Adam { beta1, beta2, eps } => {
                        let t = buf.steps as i32;
                        let c1 = 1.0 - beta1.powi(t);
                        let c2 = 1.0 - beta2.powi(t);
                        for ((m, v), gr) in buf.first.iter_mut().zip(&mut buf.second).zip(grad) {
                            *m = beta1 * *m + (1.0 - beta1) * gr;
                            *v = beta2 * *v + (1.0 - beta2) * gr * gr;
                        }
                        if eff != 0.0 {
                            let w = p.value.data_mut();
                            for ((w, m), v) in w.iter_mut().zip(&buf.first).zip(&buf.second) {
                                let mhat = m / c1;
                                let vhat = v / c2;
                                *w -= eff * mhat / (vhat.sqrt() + eps);
                            }
                        }
                    }
                }
                if !p.value.is_finite() {
                    return Err(TensorError::NonFinite {
                        op: "optimizer_step",
                    });
                }
            }
        }
        self.step_count += 1;
        Ok(())
    }
}

/// Rescales gradients of trainable groups so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(groups: &mut [ParameterGroup], max_norm: f64) -> f64 {
    let total: f64 = groups
        .iter()
        .filter(|g| g.trainable)
        .flat_map(|g| &g.tensors)
        .filter_map(|p| p.grad.as_ref())
        .map(Tensor::sum_squares)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && total > max_norm {
        let s = max_norm / total;
        for p in groups
            .iter_mut()
            .filter(|g| g.trainable)
            .flat_map(|g| &mut g.tensors)
        {
            if let Some(gr) = &mut p.grad {
                gr.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_group(v: f64, g: f64) -> ParameterGroup {
        let mut p = Param::new("w", Tensor::scalar(v));
        p.grad = Some(Tensor::scalar(g));
        ParameterGroup::new("g", vec![p])
    }

    #[test]
    fn sgd_plain_step() {
        let mut groups = vec![scalar_group(1.0, 0.5)];
        let mut opt = OptimizerState::new(OptimizerKind::SgdMomentum { momentum: 0.0 });
        opt.step(&mut groups, &[0.1]).unwrap();
        assert_eq!(groups[0].tensors[0].value.item(), 0.95);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the first update is lr·g/(|g|+ε).
        let mut groups = vec![scalar_group(1.0, 1.0)];
        let mut opt = OptimizerState::new(OptimizerKind::default());
        opt.step(&mut groups, &[0.01]).unwrap();
        let moved = 1.0 - groups[0].tensors[0].value.item();
        let expected = 0.01 * 1.0 / (1.0 + 1e-8);
        assert!((moved - expected).abs() < 1e-15, "moved {moved}");
    }

    #[test]
    fn frozen_group_is_untouched() {
        let mut groups = vec![scalar_group(-0.0, 3.0)];
        groups[0].trainable = false;
        let before = groups[0].tensors[0].value.clone();
        let mut opt = OptimizerState::new(OptimizerKind::default());
        for _ in 0..3 {
            opt.step(&mut groups, &[0.5]).unwrap();
        }
        assert!(groups[0].tensors[0].value.bit_eq(&before));
    }

    #[test]
    fn zero_scale_is_identity() {
        let mut groups = vec![scalar_group(-0.0, 3.0), scalar_group(2.5, -1.0)];
        for g in &mut groups {
            g.lr_scale = 0.0;
        }
        let snap: Vec<Tensor> = groups.iter().map(|g| g.tensors[0].value.clone()).collect();
        let mut opt = OptimizerState::new(OptimizerKind::SgdMomentum { momentum: 0.9 });
        opt.step(&mut groups, &[0.1, 0.1]).unwrap();
        for (g, s) in groups.iter().zip(&snap) {
            assert!(g.tensors[0].value.bit_eq(s));
        }
    }

    #[test]
    fn missing_gradient_is_reported() {
        let mut groups = vec![ParameterGroup::new(
            "g",
            vec![Param::new("w", Tensor::scalar(1.0))],
        )];
        let mut opt = OptimizerState::new(OptimizerKind::default());
        assert!(matches!(
            opt.step(&mut groups, &[0.1]),
            Err(TensorError::MissingGradient { .. })
        ));
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut groups = vec![scalar_group(0.0, 3.0), scalar_group(0.0, 4.0)];
        let n = clip_grad_norm(&mut groups, 0.25);
        assert_eq!(n, 5.0);
        let g0 = groups[0].tensors[0].grad.as_ref().unwrap().item();
        let g1 = groups[1].tensors[0].grad.as_ref().unwrap().item();
        assert!(((g0 * g0 + g1 * g1).sqrt() - 0.25).abs() < 1e-15);
    }
}
