//! Limited-memory BFGS minimizer with Armijo backtracking line search.

use crate::error::{Error, Result};
use crate::num::Scalar;

#[derive(Debug, Clone)]
pub struct LbfgsOptions<T> {
    /// Correction pairs kept for the two-loop recursion.
    pub memory: usize,
    pub max_iters: usize,
    /// Converged when ||g||_2 <= tol * max(1, |f|).
    pub grad_tol: T,
}

impl<T: Scalar> Default for LbfgsOptions<T> {
    fn default() -> Self {
        LbfgsOptions { memory: 10, max_iters: 500, grad_tol: T::of(1e-5) }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsResult<T> {
    pub x: Vec<T>,
    pub value: T,
    pub grad_norm: T,
    pub iterations: usize,
    pub converged: bool,
}

fn norm2<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&a| a * a).sum::<T>().sqrt()
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Minimize `f`, which writes the gradient into its second argument and
/// returns the objective. Non-finite objective values during line search are
/// treated as infeasible and the step is shortened.
pub fn lbfgs<T: Scalar>(
    f: &mut impl FnMut(&[T], &mut [T]) -> T,
    x0: Vec<T>,
    opts: &LbfgsOptions<T>,
) -> Result<LbfgsResult<T>> {
    let n = x0.len();
    if n == 0 {
        return Err(Error::invalid("lbfgs needs at least one variable"));
    }
    let mut x = x0;
    let mut g = vec![T::zero(); n];
    let mut fx = f(&x, &mut g);
    if !fx.is_finite() {
        return Err(Error::numeric("objective not finite at the starting point"));
    }

    let mut s_hist: Vec<Vec<T>> = Vec::new();
    let mut y_hist: Vec<Vec<T>> = Vec::new();
    let mut rho_hist: Vec<T> = Vec::new();

    let mut converged = false;
    let mut iterations = 0;
    for iter in 0..opts.max_iters {
        iterations = iter;
        let gnorm = norm2(&g);
        if gnorm <= opts.grad_tol * T::one().max(fx.abs()) {
            converged = true;
            break;
        }

        // Two-loop recursion for the search direction d = -H g.
        let mut q = g.clone();
        let m = s_hist.len();
        let mut alpha = vec![T::zero(); m];
        for k in (0..m).rev() {
            alpha[k] = rho_hist[k] * dot(&s_hist[k], &q);
            for j in 0..n {
                q[j] -= alpha[k] * y_hist[k][j];
            }
        }
        if m > 0 {
            let last = m - 1;
            let gamma = dot(&s_hist[last], &y_hist[last]) / dot(&y_hist[last], &y_hist[last]);
            for qj in q.iter_mut() {
                *qj *= gamma;
            }
        }
        for k in 0..m {
            let beta = rho_hist[k] * dot(&y_hist[k], &q);
            for j in 0..n {
                q[j] += s_hist[k][j] * (alpha[k] - beta);
            }
        }
        let mut d: Vec<T> = q.iter().map(|&v| -v).collect();

        let mut dir_deriv = dot(&g, &d);
        if dir_deriv >= T::zero() {
            // Not a descent direction (stale curvature); fall back to -g.
            d = g.iter().map(|&v| -v).collect();
            dir_deriv = -gnorm * gnorm;
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
        }

        // Backtracking Armijo search.
        let mut step = if m == 0 { (T::one() / gnorm).min(T::one()) } else { T::one() };
        let c1 = T::of(1e-4);
        let mut x_new = vec![T::zero(); n];
        let mut g_new = vec![T::zero(); n];
        let mut f_new;
        let mut ok = false;
        for _ in 0..50 {
            for j in 0..n {
                x_new[j] = x[j] + step * d[j];
            }
            f_new = f(&x_new, &mut g_new);
            if f_new.is_finite() && f_new <= fx + c1 * step * dir_deriv {
                // Accept; update curvature memory.
                let s: Vec<T> = (0..n).map(|j| x_new[j] - x[j]).collect();
                let y: Vec<T> = (0..n).map(|j| g_new[j] - g[j]).collect();
                let sy = dot(&s, &y);
                if sy > T::of(1e-10) * norm2(&s) * norm2(&y) {
                    if s_hist.len() == opts.memory {
                        s_hist.remove(0);
                        y_hist.remove(0);
                        rho_hist.remove(0);
                    }
                    rho_hist.push(T::one() / sy);
                    s_hist.push(s);
                    y_hist.push(y);
                }
                x.copy_from_slice(&x_new);
                g.copy_from_slice(&g_new);
                fx = f_new;
                ok = true;
                break;
            }
            step *= T::half();
        }
        if !ok {
            // Line search exhausted; x is the best point we can certify.
            break;
        }
    }

    let grad_norm = norm2(&g);
    if !converged {
        converged = grad_norm <= opts.grad_tol * T::one().max(fx.abs());
    }
    Ok(LbfgsResult { x, value: fx, grad_norm, iterations, converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn quadratic_bowl_converges() {
        let target = [3.0, -1.0, 0.5];
        let mut f = |x: &[f64], g: &mut [f64]| {
            let mut v = 0.0;
            for k in 0..3 {
                let d: f64 = x[k] - target[k];
                let w = (k + 1) as f64;
                v += 0.5 * w * d * d;
                g[k] = w * d;
            }
            v
        };
        let r = lbfgs(&mut f, vec![0.0; 3], &LbfgsOptions::default()).unwrap();
        assert!(r.converged);
        for k in 0..3 {
            assert_abs_diff_eq!(r.x[k], target[k], epsilon = 1e-5);
        }
    }

    #[test]
    fn rosenbrock_converges() {
        let mut f = |x: &[f64], g: &mut [f64]| {
            let (a, b) = (x[0], x[1]);
            g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            g[1] = 200.0 * (b - a * a);
            (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
        };
        let r = lbfgs(&mut f, vec![-1.2, 1.0], &LbfgsOptions::default()).unwrap();
        assert!(r.converged, "grad_norm={} iters={}", r.grad_norm, r.iterations);
        assert_abs_diff_eq!(r.x[0], 1.0, epsilon = 1e-4);
        assert_abs_diff_eq!(r.x[1], 1.0, epsilon = 1e-4);
    }

    #[test]
    fn f32_instantiation() {
        let mut f = |x: &[f32], g: &mut [f32]| {
            g[0] = 2.0 * (x[0] - 4.0);
            (x[0] - 4.0) * (x[0] - 4.0)
        };
        let r = lbfgs(&mut f, vec![0.0f32], &LbfgsOptions { grad_tol: 1e-3, ..Default::default() })
            .unwrap();
        assert!(r.converged);
        assert!((r.x[0] - 4.0).abs() < 1e-2);
    }

    #[test]
    fn infeasible_start_rejected() {
        let mut f = |_: &[f64], _: &mut [f64]| f64::NAN;
        assert!(lbfgs(&mut f, vec![0.0], &LbfgsOptions::default()).is_err());
    }

    #[test]
    fn barrier_objective_stays_feasible() {
        // f(x) = -ln(x) + x has minimum at 1; negative x is infeasible (NaN).
        let mut f = |x: &[f64], g: &mut [f64]| {
            if x[0] <= 0.0 {
                g[0] = f64::NAN;
                return f64::NAN;
            }
            g[0] = -1.0 / x[0] + 1.0;
            -x[0].ln() + x[0]
        };
        let r = lbfgs(&mut f, vec![3.0], &LbfgsOptions::default()).unwrap();
        assert!(r.converged);
        assert_abs_diff_eq!(r.x[0], 1.0, epsilon = 1e-5);
    }
}
