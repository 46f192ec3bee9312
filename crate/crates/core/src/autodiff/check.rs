use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Step used by the gradient checks unless a caller picks another.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of comparing a tape gradient with central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Tensor,
    pub numeric: Tensor,
    /// `max_i |analytic_i − numeric_i| / max(1, |numeric_i|)`.
    pub max_rel_error: f64,
}

/// Relative error used throughout the gradient checks.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Central-difference estimate of `∇f(x)`.
pub fn numeric_gradient(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    if !(h > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("f evaluated at coordinate {i} ± {h}")));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), grad))
}

/// Differentiates the scalar built by `build` with respect to the leaf `x`,
/// once on the tape and once by central differences, and reports the largest
/// relative disagreement.
///
/// `build` receives a fresh graph and the node holding `x`, and returns the
/// scalar root.
pub fn finite_diff_check<F>(build: F, x: &Tensor, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let leaf = g.leaf(x.clone());
    let root = build(&mut g, leaf)?;
    if !g.value(root).item().is_finite() {
        return Err(Error::NonFinite("f(x)".into()));
    }
    g.backward(root)?;
    let analytic = g.grad(leaf);

    let numeric = numeric_gradient(
        |probe| {
            let mut g = Graph::new();
            let leaf = g.leaf(probe.clone());
            let root = build(&mut g, leaf)?;
            Ok(g.value(root).item())
        },
        x,
        h,
    )?;
    let max_rel_error = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max);
    Ok(GradCheck { analytic, numeric, max_rel_error })
}
