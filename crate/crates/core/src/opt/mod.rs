//! Optimization and posterior-approximation kernels shared by all model
//! families: L-BFGS with analytic gradients for the inner MAP problem,
//! Nelder-Mead for the low-dimensional hyperparameter search, and the
//! Gaussian (Laplace) approximation built from the Hessian at the mode.

mod laplace;
mod lbfgs;
mod neldermead;

pub use laplace::{hessian_fd, GaussianApprox};
pub use lbfgs::{lbfgs, LbfgsOptions, LbfgsResult};
pub use neldermead::{nelder_mead, NelderMeadOptions, NelderMeadResult};

use crate::num::Scalar;

/// Central finite-difference gradient, for verifying analytic gradients in
/// tests and as a fallback diagnostic. Step is scaled per coordinate.
pub fn fd_gradient<T: Scalar>(mut f: impl FnMut(&[T]) -> T, x: &[T]) -> Vec<T> {
    let base = T::of(1e-5);
    let mut out = Vec::with_capacity(x.len());
    let mut xp = x.to_vec();
    for k in 0..x.len() {
        let h = base * (T::one() + x[k].abs());
        let orig = xp[k];
        xp[k] = orig + h;
        let fp = f(&xp);
        xp[k] = orig - h;
        let fm = f(&xp);
        xp[k] = orig;
        out.push((fp - fm) / (T::two() * h));
    }
    out
}
