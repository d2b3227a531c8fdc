//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::scalar::Scalar;

use super::{Graph, Tensor, Var};

/// Denominator floor for the elementwise relative error, so entries whose
/// true gradient is ~0 are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest elementwise relative error over all inputs.
    pub max_rel_err: f64,
    /// Largest absolute gradient seen (sanity: a check against all-zero
    /// gradients proves little).
    pub max_abs_grad: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare analytic gradients of `f` at `inputs` against central differences
/// with step `h`. `f` builds a one-element loss from leaf variables.
pub fn check<T, F>(inputs: &[Tensor<T>], h: f64, f: F) -> Result<GradCheck>
where
    T: Scalar,
    F: for<'g> Fn(&'g Graph<T>, &[Var<'g, T>]) -> Result<Var<'g, T>>,
{
    let graph = Graph::new();
    let vars: Vec<Var<'_, T>> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let loss = f(&graph, &vars)?;
    let grads = graph.backward(loss)?;

    let eval = |ins: &[Tensor<T>]| -> Result<f64> {
        let g = Graph::new();
        let vs: Vec<Var<'_, T>> = ins.iter().map(|t| g.constant(t.clone())).collect();
        Ok(f(&g, &vs)?.value().item().f64())
    };

    let mut out = GradCheck { max_rel_err: 0.0, max_abs_grad: 0.0, checked: 0 };
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for e in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let base = inputs[i].data()[e].f64();
            plus[i] = perturb(&inputs[i], e, T::c(base + h));
            minus[i] = perturb(&inputs[i], e, T::c(base - h));
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let a = analytic.data()[e].f64();
            out.max_rel_err = out.max_rel_err.max(relative_error(a, numeric));
            out.max_abs_grad = out.max_abs_grad.max(a.abs());
            out.checked += 1;
        }
    }
    Ok(out)
}

fn perturb<T: Scalar>(t: &Tensor<T>, idx: usize, value: T) -> Tensor<T> {
    let mut data = t.data().to_vec();
    data[idx] = value;
    Tensor::from_parts(t.shape().to_vec(), data)
}
