//! Shared test oracles.
//!
//! The central-difference gradient here is the reference implementation
//! that analytic backward passes are judged against. It knows nothing
//! about the graph: it re-evaluates a black-box objective with each
//! parameter scalar nudged up and down.

#![allow(dead_code)]

use sliceseg::autodiff::{ParamId, ParamStore};
use sliceseg::tensor::Tensor;

/// Central finite-difference gradient of `f` with respect to every scalar
/// of parameter `id`, using step `eps`. The store is restored afterwards.
pub fn fd_grad(
    store: &mut ParamStore,
    id: ParamId,
    eps: f64,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> Tensor {
    let len = store.get(id).len();
    let shape = store.get(id).shape().to_vec();
    let mut grad = vec![0.0; len];
    for i in 0..len {
        let orig = store.get(id).data()[i];
        store.get_mut(id).data_mut()[i] = orig + eps;
        let f_plus = f(store);
        store.get_mut(id).data_mut()[i] = orig - eps;
        let f_minus = f(store);
        store.get_mut(id).data_mut()[i] = orig;
        grad[i] = (f_plus - f_minus) / (2.0 * eps);
    }
    Tensor::from_vec(&shape, grad).expect("shape preserved")
}

/// Relative error with a unit floor in the denominator so comparisons
/// stay meaningful when both values are near zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Largest elementwise [`rel_err`] between two same-shaped tensors.
pub fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_rel_err shape mismatch");
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}

/// Asserts that the analytic gradient matches the numeric one within
/// `tol` relative error, with a diagnostic that names the worst entry.
pub fn assert_grads_close(analytic: &Tensor, numeric: &Tensor, tol: f64, context: &str) {
    assert_eq!(
        analytic.shape(),
        numeric.shape(),
        "{context}: gradient shape mismatch"
    );
    let mut worst = 0.0;
    let mut worst_idx = 0;
    for (i, (&a, &n)) in analytic
        .data()
        .iter()
        .zip(numeric.data().iter())
        .enumerate()
    {
        let e = rel_err(a, n);
        if e > worst {
            worst = e;
            worst_idx = i;
        }
    }
    assert!(
        worst <= tol,
        "{context}: max relative error {worst:.3e} > {tol:.0e} at flat index {worst_idx} \
         (analytic {}, numeric {})",
        analytic.data()[worst_idx],
        numeric.data()[worst_idx]
    );
}
