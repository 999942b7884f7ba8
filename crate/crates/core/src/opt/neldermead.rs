//! Nelder-Mead simplex minimizer for the small hyperparameter searches
//! (one to four dimensions) where gradients of the Laplace marginal are
//! impractical.

use crate::error::{Error, Result};
use crate::num::Scalar;

#[derive(Debug, Clone)]
pub struct NelderMeadOptions<T> {
    pub max_evals: usize,
    /// Stop when the simplex f-spread falls below this.
    pub f_tol: T,
    /// Initial displacement per coordinate when building the simplex.
    pub init_step: T,
}

impl<T: Scalar> Default for NelderMeadOptions<T> {
    fn default() -> Self {
        NelderMeadOptions { max_evals: 200, f_tol: T::of(1e-7), init_step: T::of(0.5) }
    }
}

#[derive(Debug, Clone)]
pub struct NelderMeadResult<T> {
    pub x: Vec<T>,
    pub value: T,
    pub evaluations: usize,
}

/// Minimize `f` from `x0`. Non-finite values are treated as +inf so the
/// simplex retreats from infeasible regions.
pub fn nelder_mead<T: Scalar>(
    f: &mut impl FnMut(&[T]) -> T,
    x0: &[T],
    opts: &NelderMeadOptions<T>,
) -> Result<NelderMeadResult<T>> {
    let n = x0.len();
    if n == 0 {
        return Err(Error::invalid("nelder-mead needs at least one variable"));
    }
    let mut evals = 0usize;
    let mut eval = |x: &[T], evals: &mut usize| -> T {
        *evals += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            T::infinity()
        }
    };

    // Simplex of n+1 points: x0 and x0 displaced along each axis.
    let mut pts: Vec<Vec<T>> = Vec::with_capacity(n + 1);
    pts.push(x0.to_vec());
    for k in 0..n {
        let mut p = x0.to_vec();
        p[k] += opts.init_step;
        pts.push(p);
    }
    let mut vals: Vec<T> = pts.iter().map(|p| eval(p, &mut evals)).collect();

    let (alpha, gamma, rho, sigma) = (T::one(), T::two(), T::half(), T::half());
    while evals < opts.max_evals {
        // Order ascending by value.
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap_or(std::cmp::Ordering::Equal));
        let best = order[0];
        let worst = order[n];
        let second_worst = order[n - 1];
        if (vals[worst] - vals[best]).abs() <= opts.f_tol * (T::one() + vals[best].abs()) {
            break;
        }

        // Centroid of all but the worst.
        let mut centroid = vec![T::zero(); n];
        for (idx, p) in pts.iter().enumerate() {
            if idx != worst {
                for j in 0..n {
                    centroid[j] += p[j];
                }
            }
        }
        for c in centroid.iter_mut() {
            *c /= T::of_usize(n);
        }

        let blend = |a: &[T], b: &[T], w: T| -> Vec<T> {
            (0..n).map(|j| a[j] + w * (a[j] - b[j])).collect()
        };

        let reflected = blend(&centroid, &pts[worst], alpha);
        let f_r = eval(&reflected, &mut evals);
        if f_r < vals[best] {
            let expanded = blend(&centroid, &pts[worst], gamma);
            let f_e = eval(&expanded, &mut evals);
            if f_e < f_r {
                pts[worst] = expanded;
                vals[worst] = f_e;
            } else {
                pts[worst] = reflected;
                vals[worst] = f_r;
            }
        } else if f_r < vals[second_worst] {
            pts[worst] = reflected;
            vals[worst] = f_r;
        } else {
            // Contraction toward the better of (worst, reflected).
            let (toward, f_toward) = if f_r < vals[worst] {
                (reflected.clone(), f_r)
            } else {
                (pts[worst].clone(), vals[worst])
            };
            let contracted: Vec<T> =
                (0..n).map(|j| centroid[j] + rho * (toward[j] - centroid[j])).collect();
            let f_c = eval(&contracted, &mut evals);
            if f_c < f_toward {
                pts[worst] = contracted;
                vals[worst] = f_c;
            } else {
                // Shrink toward the best point.
                let best_pt = pts[best].clone();
                for idx in 0..=n {
                    if idx == best {
                        continue;
                    }
                    for j in 0..n {
                        pts[idx][j] = best_pt[j] + sigma * (pts[idx][j] - best_pt[j]);
                    }
                    vals[idx] = eval(&pts[idx].clone(), &mut evals);
                }
            }
        }
    }

    let mut best = 0;
    for k in 1..=n {
        if vals[k] < vals[best] {
            best = k;
        }
    }
    if !vals[best].is_finite() {
        return Err(Error::numeric("nelder-mead found no finite objective value"));
    }
    Ok(NelderMeadResult { x: pts[best].clone(), value: vals[best], evaluations: evals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn quadratic_two_dim() {
        let mut f = |x: &[f64]| (x[0] - 2.0).powi(2) + (x[1] + 1.0).powi(2);
        let r = nelder_mead(
            &mut f,
            &[0.0, 0.0],
            &NelderMeadOptions { max_evals: 500, ..Default::default() },
        )
        .unwrap();
        assert_abs_diff_eq!(r.x[0], 2.0, epsilon = 1e-3);
        assert_abs_diff_eq!(r.x[1], -1.0, epsilon = 1e-3);
    }

    #[test]
    fn one_dim_with_infeasible_region() {
        // Minimum of x^2 - ln(x) at x = 1/sqrt(2); x <= 0 is NaN.
        let mut f = |x: &[f64]| {
            if x[0] <= 0.0 {
                f64::NAN
            } else {
                x[0] * x[0] - x[0].ln()
            }
        };
        let r = nelder_mead(
            &mut f,
            &[2.0],
            &NelderMeadOptions { max_evals: 300, ..Default::default() },
        )
        .unwrap();
        assert_abs_diff_eq!(r.x[0], 1.0 / 2.0f64.sqrt(), epsilon = 1e-3);
    }

    #[test]
    fn respects_eval_budget() {
        let mut count = 0usize;
        let mut f = |x: &[f64]| {
            count += 1;
            x[0] * x[0]
        };
        let r = nelder_mead(
            &mut f,
            &[10.0],
            &NelderMeadOptions { max_evals: 25, ..Default::default() },
        )
        .unwrap();
        assert!(count <= 25 + 4, "count={count}");
        assert!(r.evaluations <= count);
    }
}
