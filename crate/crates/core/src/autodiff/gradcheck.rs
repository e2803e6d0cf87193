//! Central-finite-difference verification of analytic gradients.

use super::graph::{Arr, Graph, Tensor};

/// Maximum relative error between analytic and numeric gradients of a
/// scalar-valued function of the given inputs.
pub fn max_grad_error<F>(inputs: &[Arr], f: F) -> f64
where
    F: Fn(&Graph, &[Tensor]) -> Tensor,
{
    max_grad_error_eps(inputs, f, 1e-4)
}

pub fn max_grad_error_eps<F>(inputs: &[Arr], f: F, eps: f64) -> f64
where
    F: Fn(&Graph, &[Tensor]) -> Tensor,
{
    let g = Graph::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
    let loss = f(&g, &leaves);
    assert_eq!(loss.value().len(), 1, "gradcheck target must be scalar");
    let grads = loss.backward();
    let analytic: Vec<Arr> = leaves.iter().map(|t| grads.get_or_zeros(t)).collect();

    let eval = |points: &[Arr]| -> f64 {
        let g = Graph::new();
        let leaves: Vec<Tensor> = points.iter().map(|a| g.leaf(a.clone())).collect();
        f(&g, &leaves).scalar()
    };

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].as_slice_mut().unwrap()[j] += eps;
            let mut minus = inputs.to_vec();
            minus[i].as_slice_mut().unwrap()[j] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic[i].as_slice().unwrap()[j];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            let rel = (a - numeric).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}
