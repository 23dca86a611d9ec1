//! Central finite differences, used as an independent oracle for the
//! analytic gradients produced by [`Graph::backward`].

use super::{Graph, GraphError, NodeId, Tensor};

/// Central-difference estimate of the gradient of a scalar function.
///
/// Each coordinate is perturbed by `±eps` in turn:
/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
pub fn finite_diff_grad<E>(
    mut f: impl FnMut(&Tensor) -> Result<f64, E>,
    at: &Tensor,
    eps: f64,
) -> Result<Tensor, E> {
    assert!(eps > 0.0, "finite difference step must be positive");
    let mut x = at.clone();
    let mut out = Vec::with_capacity(at.numel());
    for i in 0..at.numel() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + eps;
        let hi = f(&x)?;
        x.data_mut()[i] = orig - eps;
        let lo = f(&x)?;
        x.data_mut()[i] = orig;
        out.push((hi - lo) / (2.0 * eps));
    }
    Ok(Tensor::new(at.shape().to_vec(), out).expect("same shape"))
}

/// Outcome of comparing backpropagated and finite-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Tensor,
    pub numeric: Tensor,
    /// `|a - n|_2 / max(|a|_2 + |n|_2, 1e-12)`.
    pub rel_error: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_error <= tol
    }
}

/// Relative error between two gradient vectors, normalised by their
/// combined magnitude so that all-zero gradients compare equal.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nb).max(1e-12)
}

/// Builds `build(graph, x)` once to backpropagate, then re-evaluates it
/// under central differences around `at`.
pub fn check_gradient(
    build: impl Fn(&mut Graph, NodeId) -> Result<NodeId, GraphError>,
    at: &Tensor,
    eps: f64,
) -> Result<GradCheck, GraphError> {
    let mut g = Graph::new();
    let x = g.param(at.clone());
    let root = build(&mut g, x)?;
    g.backward(root)?;
    let analytic = g.grad(x);
    let numeric = finite_diff_grad(
        |t| {
            let mut g = Graph::new();
            let x = g.param(t.clone());
            let root = build(&mut g, x)?;
            g.value(root)
                .item()
                .ok_or_else(|| GraphError::NonScalarRoot(g.shape(root).to_vec()))
        },
        at,
        eps,
    )?;
    let rel_error = relative_error(analytic.data(), numeric.data());
    Ok(GradCheck {
        analytic,
        numeric,
        rel_error,
    })
}
