use serde::{Deserialize, Serialize};

use super::{BaselineError, SparseVector, Task};
use crate::text::TargetValue;

/// A feature vector the linear baselines can consume.
pub trait FeatureRow {
    fn dim(&self) -> usize;
    /// Calls `f(index, value)` for every (possibly) nonzero entry.
    fn for_each_nonzero(&self, f: impl FnMut(usize, f64));

    fn dot(&self, w: &[f64]) -> f64 {
        let mut s = 0.0;
        self.for_each_nonzero(|i, v| s += w[i] * v);
        s
    }

    fn norm_sq(&self) -> f64 {
        let mut s = 0.0;
        self.for_each_nonzero(|_, v| s += v * v);
        s
    }
}

impl FeatureRow for SparseVector {
    fn dim(&self) -> usize {
        SparseVector::dim(self)
    }

    fn for_each_nonzero(&self, mut f: impl FnMut(usize, f64)) {
        for &(i, c) in self.entries() {
            f(i, c as f64);
        }
    }
}

impl FeatureRow for Vec<f64> {
    fn dim(&self) -> usize {
        self.len()
    }

    fn for_each_nonzero(&self, mut f: impl FnMut(usize, f64)) {
        for (i, &v) in self.iter().enumerate() {
            f(i, v);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearOptions {
    /// L2 penalty on the weights; the bias is not penalized.
    pub l2: f64,
    /// Stop once the full gradient norm falls below this.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Number of classes; defaults to one past the largest training label.
    pub n_classes: Option<usize>,
}

impl Default for LinearOptions {
    fn default() -> Self {
        Self {
            l2: 0.0,
            tolerance: 1e-8,
            max_iterations: 10_000,
            n_classes: None,
        }
    }
}

/// Multinomial logistic regression or least-squares regression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub task: Task,
    pub dim: usize,
    /// `[K, D]` row-major; `K = 1` for regression.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    /// Set when every training label was the same class.
    pub constant_class: Option<usize>,
}

impl LinearModel {
    pub fn outputs(&self) -> usize {
        self.bias.len()
    }

    fn scores<F: FeatureRow>(&self, x: &F) -> Vec<f64> {
        (0..self.outputs())
            .map(|k| x.dot(&self.weights[k * self.dim..(k + 1) * self.dim]) + self.bias[k])
            .collect()
    }

    /// Class probabilities; panics for a regression model.
    pub fn predict_proba<F: FeatureRow>(&self, x: &F) -> Vec<f64> {
        assert_eq!(
            self.task,
            Task::Classify,
            "predict_proba on a regression model"
        );
        if let Some(c) = self.constant_class {
            let mut p = vec![0.0; self.outputs()];
            p[c] = 1.0;
            return p;
        }
        softmax(&self.scores(x))
    }

    pub fn predict<F: FeatureRow>(&self, x: &F) -> TargetValue {
        match self.task {
            Task::Regress => TargetValue::Score(self.scores(x)[0]),
            Task::Classify => {
                if let Some(c) = self.constant_class {
                    return TargetValue::Class(c);
                }
                let s = self.scores(x);
                let best = (0..s.len()).fold(0, |b, k| if s[k] > s[b] { k } else { b });
                TargetValue::Class(best)
            }
        }
    }
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Largest eigenvalue of `(1/n) Σ x̃ x̃ᵀ` with `x̃ = [x; 1]`, by power
/// iteration. Only used to pick a stable step size.
fn curvature<F: FeatureRow>(xs: &[F], dim: usize) -> f64 {
    let n = xs.len() as f64;
    let mut v = vec![1.0 / ((dim + 1) as f64).sqrt(); dim + 1];
    let mut lambda = 0.0;
    for _ in 0..60 {
        let mut out = vec![0.0; dim + 1];
        for x in xs {
            let s = x.dot(&v[..dim]) + v[dim];
            x.for_each_nonzero(|i, xv| out[i] += s * xv / n);
            out[dim] += s / n;
        }
        let norm = out.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = out.into_iter().map(|a| a / norm).collect();
    }
    lambda
}

pub fn train_linear_baseline<F: FeatureRow>(
    features: &[F],
    labels: &[TargetValue],
    task: Task,
    l2: f64,
) -> Result<LinearModel, BaselineError> {
    train_linear_baseline_with(
        features,
        labels,
        task,
        &LinearOptions {
            l2,
            ..LinearOptions::default()
        },
    )
}

/// Full-batch gradient descent with steps set from a power-iteration bound
/// on the curvature of the objective.
pub fn train_linear_baseline_with<F: FeatureRow>(
    features: &[F],
    labels: &[TargetValue],
    task: Task,
    opts: &LinearOptions,
) -> Result<LinearModel, BaselineError> {
    if features.len() != labels.len() {
        return Err(BaselineError::LengthMismatch {
            predictions: features.len(),
            truths: labels.len(),
        });
    }
    if features.is_empty() {
        return Err(BaselineError::Empty("no training examples".into()));
    }
    if !opts.l2.is_finite() || opts.l2 < 0.0 {
        return Err(BaselineError::InvalidArgument(format!("l2 = {}", opts.l2)));
    }
    let dim = features[0].dim();
    if let Some(bad) = features.iter().position(|x| x.dim() != dim) {
        return Err(BaselineError::InvalidArgument(format!(
            "feature {bad} has dimension {}, expected {dim}",
            features[bad].dim()
        )));
    }

    let (k, classes, ys) = match task {
        Task::Classify => {
            let classes = labels
                .iter()
                .map(|l| match l {
                    TargetValue::Class(c) => Ok(*c),
                    TargetValue::Score(_) => Err(BaselineError::MixedTargets),
                })
                .collect::<Result<Vec<_>, _>>()?;
            let seen = classes.iter().max().unwrap() + 1;
            let k = opts.n_classes.unwrap_or(seen);
            if seen > k {
                return Err(BaselineError::InvalidArgument(format!(
                    "label {} outside {k} classes",
                    seen - 1
                )));
            }
            (k, classes, Vec::new())
        }
        Task::Regress => {
            let ys = labels
                .iter()
                .map(|l| match l {
                    TargetValue::Score(s) => Ok(*s),
                    TargetValue::Class(_) => Err(BaselineError::MixedTargets),
                })
                .collect::<Result<Vec<_>, _>>()?;
            (1, Vec::new(), ys)
        }
    };

    let mut model = LinearModel {
        task,
        dim,
        weights: vec![0.0; k * dim],
        bias: vec![0.0; k],
        iterations: 0,
        grad_norm: f64::INFINITY,
        converged: false,
        constant_class: None,
    };

    if task == Task::Classify && classes.iter().all(|&c| c == classes[0]) {
        log::warn!(
            "every training label is class {}; emitting a constant predictor",
            classes[0]
        );
        model.constant_class = Some(classes[0]);
        model.grad_norm = 0.0;
        model.converged = true;
        return Ok(model);
    }

    let c = curvature(features, dim);
    let scale = if task == Task::Classify { 0.5 } else { 1.0 };
    // Separate steps for the weights and the unpenalized bias keep a large
    // l2 from stalling the bias; each block stays below its own curvature.
    let step_b = 1.0 / (scale * c * 1.05).max(1e-12);
    let step_w = 1.0 / (scale * c * 1.05 + opts.l2).max(1e-12);
    let n = features.len() as f64;

    let mut gw = vec![0.0; k * dim];
    let mut gb = vec![0.0; k];
    while model.iterations < opts.max_iterations {
        gw.iter_mut().for_each(|g| *g = 0.0);
        gb.iter_mut().for_each(|g| *g = 0.0);
        for (i, x) in features.iter().enumerate() {
            let mut r = model.scores(x);
            match task {
                Task::Classify => {
                    r = softmax(&r);
                    r[classes[i]] -= 1.0;
                }
                Task::Regress => r[0] -= ys[i],
            }
            for (kk, rk) in r.iter().enumerate() {
                let row = &mut gw[kk * dim..(kk + 1) * dim];
                x.for_each_nonzero(|j, v| row[j] += rk * v / n);
                gb[kk] += rk / n;
            }
        }
        for (g, w) in gw.iter_mut().zip(&model.weights) {
            *g += opts.l2 * w;
        }
        let norm = gw.iter().chain(&gb).map(|g| g * g).sum::<f64>().sqrt();
        model.grad_norm = norm;
        if !norm.is_finite() {
            return Err(BaselineError::NonFinite);
        }
        if norm < opts.tolerance {
            model.converged = true;
            break;
        }
        for (w, g) in model.weights.iter_mut().zip(&gw) {
            *w -= step_w * g;
        }
        for (b, g) in model.bias.iter_mut().zip(&gb) {
            *b -= step_b * g;
        }
        model.iterations += 1;
    }
    if !model.converged {
        log::info!(
            "linear baseline stopped after {} iterations, gradient norm {:.3e}",
            model.iterations,
            model.grad_norm
        );
    }
    Ok(model)
}
