//! Central finite-difference check of graph gradients.

use alloc::vec::Vec;

use crate::graph::{Graph, GraphError, NodeId};
use crate::tensor::Tensor;

/// Compares the analytic gradient of `f` at `point` against central
/// differences with the given `step`.
///
/// `f` receives a fresh graph and the parameter node holding the point, and
/// must return a scalar node. The result is the maximum over coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`.
///
/// Functions that record a detach are rejected: their analytic gradient is
/// zero along the detached path by construction, so finite differences are
/// not a valid oracle for them.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64, GraphError>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId, GraphError>,
{
    if !(step > 0.0) {
        return Err(GraphError::InvalidArgument {
            primitive: "grad-check",
            reason: "step must be positive",
        });
    }
    let mut g = Graph::new();
    let x = g.parameter(point.clone());
    let root = f(&mut g, x)?;
    if g.contains_detach() {
        return Err(GraphError::DetachInGradCheck);
    }
    let grads = g.backward(root)?;
    let analytic = grads.get(x).expect("parameter always has a gradient").values().to_vec();

    let eval = |values: Vec<f64>| -> Result<f64, GraphError> {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::from_parts(point.shape().to_vec(), values));
        let root = f(&mut g, x)?;
        Ok(g.value(root).item().unwrap_or(f64::NAN))
    };

    let mut worst = 0.0f64;
    for (k, &a) in analytic.iter().enumerate() {
        let mut plus = point.values().to_vec();
        plus[k] += step;
        let mut minus = point.values().to_vec();
        minus[k] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let err = libm::fabs(a - numeric) / libm::fabs(a).max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
