//! Central finite-difference gradient checking, shared by tests downstream.

use crate::tensor::{Arr, Tensor};

/// Compare analytic gradients of `f` against central finite differences.
///
/// `inputs` become watched variables; `f` must build a scalar loss from them.
/// Panics if any element's error exceeds `tol` relative to
/// `max(|analytic|, |numeric|, floor)`.
pub fn finite_diff_check(
    inputs: &[Arr],
    f: impl Fn(&[Tensor]) -> Tensor,
    eps: f64,
    tol_floor: f64,
) {
    let vars: Vec<Tensor> = inputs.iter().map(|a| Tensor::var(a.clone())).collect();
    let loss = f(&vars);
    let grads = loss.backward();

    for (vi, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(var.leaf_id().unwrap())
            .cloned()
            .unwrap_or_else(|| Arr::zeros(var.data().raw_dim()));
        let mut worst = 0.0f64;
        let mut worst_at = 0usize;
        for i in 0..var.len() {
            let numeric = {
                let eval = |delta: f64| -> f64 {
                    let vs: Vec<Tensor> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, a)| {
                            let mut a = a.clone();
                            if j == vi {
                                a.as_slice_mut().unwrap()[i] += delta;
                            }
                            Tensor::constant(a)
                        })
                        .collect();
                    f(&vs).scalar()
                };
                (eval(eps) - eval(-eps)) / (2.0 * eps)
            };
            let a = analytic.as_slice().unwrap()[i];
            let scale = a.abs().max(numeric.abs()).max(tol_floor.max(1e-8));
            let rel = (a - numeric).abs() / scale;
            if rel > worst {
                worst = rel;
                worst_at = i;
            }
        }
        assert!(
            worst <= 1e-3,
            "gradient check failed for input {vi} at flat index {worst_at}: rel err {worst:.3e}"
        );
    }
}
