use super::{Graph, NodeId, Tensor, TensorError};

/// `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

fn eval(
    f: &impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId, TensorError>,
    inputs: &[Tensor],
) -> Result<f64, TensorError> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &ids)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(TensorError::NonScalarLoss {
            shape: v.shape().to_vec(),
        });
    }
    Ok(v.item())
}

fn analytic(
    f: &impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId, TensorError>,
    inputs: &[Tensor],
) -> Result<Vec<Tensor>, TensorError> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &ids)?;
    g.backward(out)?;
    Ok(ids
        .iter()
        .zip(inputs)
        .map(|(id, t)| {
            g.grad(*id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect())
}

/// Compares backward-pass gradients of a scalar function against central
/// finite differences and returns the largest relative error over every
/// input coordinate.
///
/// The function must be deterministic: anything random (dropout) has to be
/// driven by masks fixed outside `f`.
pub fn gradient_check(
    f: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId, TensorError>,
    inputs: &[Tensor],
    eps: f64,
) -> Result<f64, TensorError> {
    let grads = analytic(&f, inputs)?;
    compare_with_finite_differences(|xs| eval(&f, xs), &grads, inputs, eps)
}

/// Finite-difference comparison against caller-supplied analytic gradients.
pub fn compare_with_finite_differences(
    value: impl Fn(&[Tensor]) -> Result<f64, TensorError>,
    analytic: &[Tensor],
    inputs: &[Tensor],
    eps: f64,
) -> Result<f64, TensorError> {
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(TensorError::InvalidArgument(format!(
            "eps must lie in (0, 1e-3], got {eps}"
        )));
    }
    if analytic.len() != inputs.len() {
        return Err(TensorError::InvalidArgument(
            "one analytic gradient per input required".into(),
        ));
    }
    let base = value(inputs)?;
    if value(inputs)?.to_bits() != base.to_bits() {
        return Err(TensorError::NonDeterministic);
    }
    let mut xs: Vec<Tensor> = inputs.to_vec();
    let mut worst = 0.0f64;
    for (i, grad) in analytic.iter().enumerate() {
        if grad.shape() != inputs[i].shape() {
            return Err(TensorError::ShapeMismatch {
                op: "gradient_check",
                lhs: inputs[i].shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        for k in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[k];
            xs[i].data_mut()[k] = x0 + eps;
            let plus = value(&xs)?;
            xs[i].data_mut()[k] = x0 - eps;
            let minus = value(&xs)?;
            xs[i].data_mut()[k] = x0;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(grad.data()[k], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_has_exact_gradient() {
        // At the largest step the rounding in (f(x+h) - f(x-h)) / 2h stays
        // far below the bound.
        let x = Tensor::vector(vec![0.3, -1.2, 4.0]);
        let err = gradient_check(|g, xs| g.sum(xs[0]), &[x], 1e-3).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn cross_entropy_three_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Tensor::uniform(&[2, 3], 1.0, &mut rng);
        let err =
            gradient_check(|g, xs| g.softmax_cross_entropy(xs[0], &[2, 0]), &[z], 1e-6).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let x = Tensor::vector(vec![0.5, -0.7]);
        // true gradient of sum(x²) is 2x; supply 3x
        let wrong = Tensor::vector(x.data().iter().map(|v| 3.0 * v).collect());
        let err = compare_with_finite_differences(
            |xs| Ok(xs[0].data().iter().map(|v| v * v).sum()),
            &[wrong],
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(err > 1e-2, "{err}");
    }

    #[test]
    fn unmasked_randomness_is_rejected() {
        let calls = std::cell::Cell::new(0u64);
        let x = Tensor::vector(vec![1.0, 2.0]);
        let res = gradient_check(
            |g, xs| {
                calls.set(calls.get() + 1);
                let mut rng = ChaCha8Rng::seed_from_u64(calls.get());
                let m = Tensor::vector(vec![rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0)]);
                let d = g.masked(xs[0], &m)?;
                g.sum(d)
            },
            &[x],
            1e-6,
        );
        assert_eq!(res, Err(TensorError::NonDeterministic));
    }

    #[test]
    fn eps_bounds() {
        let x = Tensor::vector(vec![1.0]);
        assert!(gradient_check(|g, xs| g.sum(xs[0]), std::slice::from_ref(&x), 0.0).is_err());
        assert!(gradient_check(|g, xs| g.sum(xs[0]), &[x], 1e-2).is_err());
    }
}
