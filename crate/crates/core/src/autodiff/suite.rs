//! Finite-difference checks for every differentiable graph op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gradient_check, Graph, NodeId, Tensor, TensorError};

/// Step used by [`primitive_checks`].
pub const SUITE_EPS: f64 = 1e-6;

/// Entries bounded away from zero so kinks (relu) and ties (max) stay more
/// than `eps` away.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.2..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Reduces an op's output to a scalar through fixed random weights so the
/// upstream gradient is not uniform.
fn weighted_sum(g: &mut Graph, out: NodeId, w: &Tensor) -> Result<NodeId, TensorError> {
    let c = g.constant(w.clone());
    let p = g.mul(out, c)?;
    g.sum(p)
}

/// Runs one gradient check per primitive for `seed` and returns
/// `(op name, max relative error)` pairs.
pub fn primitive_checks(seed: u64) -> Result<Vec<(&'static str, f64)>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = SUITE_EPS;
    let mut out = Vec::new();

    let a = away_from_zero(&[3, 4], &mut rng);
    let b = away_from_zero(&[3, 4], &mut rng);
    let w34 = away_from_zero(&[3, 4], &mut rng);
    let m = away_from_zero(&[4, 2], &mut rng);
    let w32 = away_from_zero(&[3, 2], &mut rng);
    let w43 = away_from_zero(&[4, 3], &mut rng);
    let bias = away_from_zero(&[4], &mut rng);

    type Check<'a> = (
        &'static str,
        Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId, TensorError> + 'a>,
        Vec<Tensor>,
    );
    let checks: Vec<Check> = vec![
        (
            "matmul",
            Box::new(|g, x| {
                let y = g.matmul(x[0], x[1])?;
                weighted_sum(g, y, &w32)
            }),
            vec![a.clone(), m.clone()],
        ),
        (
            "transpose",
            Box::new(|g, x| {
                let y = g.transpose(x[0])?;
                weighted_sum(g, y, &w43)
            }),
            vec![a.clone()],
        ),
        (
            "add",
            Box::new(|g, x| {
                let y = g.add(x[0], x[1])?;
                weighted_sum(g, y, &w34)
            }),
            vec![a.clone(), b.clone()],
        ),
        (
            "sub",
            Box::new(|g, x| {
                let y = g.sub(x[0], x[1])?;
                weighted_sum(g, y, &w34)
            }),
            vec![a.clone(), b.clone()],
        ),
        (
            "mul",
            Box::new(|g, x| {
                let y = g.mul(x[0], x[1])?;
                weighted_sum(g, y, &w34)
            }),
            vec![a.clone(), b.clone()],
        ),
        (
            "add_row",
            Box::new(|g, x| {
                let y = g.add_row(x[0], x[1])?;
                weighted_sum(g, y, &w34)
            }),
            vec![a.clone(), bias.clone()],
        ),
        (
            "scale",
            Box::new(|g, x| {
                let y = g.scale(x[0], -1.7)?;
                weighted_sum(g, y, &w34)
            }),
            vec![a.clone()],
        ),
        (
            "tanh",
            Box::new(|g, x| {
                let y = g.tanh(x[0])?;
                weighted_sum(g, y, &w34)
            }),
            vec![a.clone()],
        ),
        (
            "sigmoid",
            Box::new(|g, x| {
                let y = g.sigmoid(x[0])?;
                weighted_sum(g, y, &w34)
            }),
            vec![a.clone()],
        ),
        (
            "relu",
            Box::new(|g, x| {
                let y = g.relu(x[0])?;
                weighted_sum(g, y, &w34)
            }),
            vec![a.clone()],
        ),
        (
            "dropout",
            Box::new(|g, x| {
                let y = g.masked(x[0], &b)?;
                weighted_sum(g, y, &w34)
            }),
            vec![a.clone()],
        ),
        (
            "blend_rows",
            Box::new(|g, x| {
                let y = g.blend_rows(x[0], x[1], &[true, false, true])?;
                weighted_sum(g, y, &w34)
            }),
            vec![a.clone(), b.clone()],
        ),
        (
            "slice_cols",
            Box::new(|g, x| {
                let y = g.slice_cols(x[0], 1, 2)?;
                weighted_sum(g, y, &w32)
            }),
            vec![a.clone()],
        ),
        (
            "concat_cols",
            Box::new(|g, x| {
                let l = g.slice_cols(x[1], 0, 2)?;
                let y = g.concat_cols(&[x[0], l])?;
                let y = g.slice_cols(y, 2, 4)?;
                weighted_sum(g, y, &w34)
            }),
            vec![a.clone(), b.clone()],
        ),
        (
            "concat_rows",
            Box::new(|g, x| {
                let y = g.concat_rows(&[x[0], x[1]])?;
                let t = g.transpose(y)?;
                let y = g.matmul(t, x[2])?;
                g.sum(y)
            }),
            vec![a.clone(), b.clone(), away_from_zero(&[6, 2], &mut rng)],
        ),
        (
            "embedding",
            Box::new(|g, x| {
                let y = g.embedding(x[0], &[2, 0, 2])?;
                weighted_sum(g, y, &w34)
            }),
            vec![away_from_zero(&[4, 4], &mut rng)],
        ),
        ("sum", Box::new(|g, x| g.sum(x[0])), vec![a.clone()]),
        (
            "mean",
            Box::new(|g, x| {
                let y = g.mul(x[0], x[0])?;
                g.mean(y)
            }),
            vec![a.clone()],
        ),
        (
            "softmax_cross_entropy",
            Box::new(|g, x| g.softmax_cross_entropy(x[0], &[3, 0, 1])),
            vec![a.clone()],
        ),
        (
            "squared_error",
            Box::new(|g, x| g.squared_error(x[0], &[0.3, -1.0, 2.0])),
            vec![away_from_zero(&[3, 1], &mut rng)],
        ),
        (
            "max_over_time",
            Box::new(|g, x| {
                let valid = vec![
                    vec![true, true, false],
                    vec![true, false, true],
                    vec![true; 3],
                ];
                let y = g.max_over_time(&[x[0], x[1], x[2]], &valid)?;
                weighted_sum(g, y, &w34)
            }),
            distinct_steps(3, &mut rng),
        ),
        (
            "mean_over_time",
            Box::new(|g, x| {
                let valid = vec![vec![true, true, false], vec![false, true, true]];
                let y = g.mean_over_time(&[x[0], x[1]], &valid)?;
                weighted_sum(g, y, &w34)
            }),
            vec![a.clone(), b.clone()],
        ),
    ];

    for (name, f, inputs) in checks {
        out.push((name, gradient_check(f, &inputs, eps)?));
    }
    Ok(out)
}

/// Time steps whose entries differ pairwise by at least 0.3 at every
/// position, so the argmax is stable under perturbation.
fn distinct_steps(n: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let mut steps: Vec<Vec<f64>> = vec![Vec::with_capacity(12); n];
    for _ in 0..12 {
        let base: f64 = rng.gen_range(-1.0..1.0);
        let mut offsets: Vec<f64> = (0..n).map(|i| 0.3 * i as f64).collect();
        for i in (1..n).rev() {
            offsets.swap(i, rng.gen_range(0..=i));
        }
        for (s, o) in steps.iter_mut().zip(offsets) {
            s.push(base + o);
        }
    }
    steps
        .into_iter()
        .map(|d| Tensor::new(vec![3, 4], d).expect("3x4"))
        .collect()
}
