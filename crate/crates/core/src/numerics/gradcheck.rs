use crate::error::{dim_err, Error, Result};

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Compares an analytic gradient with central differences.
///
/// `f` returns the scalar value at a point and its analytic gradient there.
/// The result is `max_i |a_i − c_i| / (|a_i| + |c_i| + 1e-12)` where `c_i` is
/// the central difference along coordinate `i` with step `eps`.
pub fn finite_difference_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<(f64, Vec<f64>)>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Config(format!("step must be positive, got {eps}")));
    }
    let (value, analytic) = f(point)?;
    if !value.is_finite() || analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite value at the base point".into()));
    }
    if analytic.len() != point.numel() {
        return Err(dim_err(format!(
            "gradient has {} entries for a point with {}",
            analytic.len(),
            point.numel()
        )));
    }
    let mut worst: f64 = 0.0;
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let x = point.data()[i];
        probe.data_mut()[i] = x + eps;
        let up = f(&probe)?.0;
        probe.data_mut()[i] = x - eps;
        let down = f(&probe)?.0;
        probe.data_mut()[i] = x;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value when perturbing coordinate {i}"
            )));
        }
        let central = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let err = (a - central).abs() / (a.abs() + central.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Adapts a graph-building closure into the `(value, gradient)` form that
/// [`finite_difference_check`] expects. The closure receives the point as a
/// differentiable leaf and returns a scalar.
pub fn graph_fn<F>(build: F) -> impl Fn(&Tensor) -> Result<(f64, Vec<f64>)>
where
    F: for<'g> Fn(&mut Graph<'g>, Var) -> Result<Var>,
{
    move |point: &Tensor| {
        let mut g = Graph::new();
        let x = g.input(point.clone().with_grad(true));
        let out = build(&mut g, x)?;
        let value = g.value(out).data()[0];
        let grads = g.backward(out)?;
        let grad = grads
            .wrt(x)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; point.numel()]);
        Ok((value, grad))
    }
}
