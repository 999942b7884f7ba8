//! Gaussian approximation of a posterior at its mode: N(mode, H^{-1}) with
//! H the Hessian of the negative log-posterior, factored once and reused for
//! sampling and the Laplace marginal-likelihood correction.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::linalg::{Cholesky, DMat};
use crate::num::Scalar;

#[derive(Debug, Clone)]
pub struct GaussianApprox<T> {
    pub mode: Vec<T>,
    chol: Cholesky<T>,
    log_det_hessian: T,
    /// Diagonal jitter that was needed to factor the Hessian; 0 for a
    /// cleanly positive-definite mode.
    pub jitter: T,
}

impl<T: Scalar> GaussianApprox<T> {
    /// Build from the Hessian of the negative log-posterior at `mode`.
    /// The matrix is symmetrized first; near-singular Hessians get an
    /// escalating diagonal jitter before being rejected.
    pub fn from_hessian(mode: Vec<T>, hessian: &DMat<T>) -> Result<Self> {
        let n = hessian.nrows();
        let mut sym = DMat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                sym[(i, j)] = (hessian[(i, j)] + hessian[(j, i)]) * T::half();
            }
        }
        let (chol, jitter) = Cholesky::with_jitter(&sym, 12)?;
        let log_det_hessian = chol.log_det();
        Ok(GaussianApprox { mode, chol, log_det_hessian, jitter })
    }

    pub fn dim(&self) -> usize {
        self.mode.len()
    }

    pub fn log_det_hessian(&self) -> T {
        self.log_det_hessian
    }

    /// Additive Laplace correction: log integral exp(-q(x)) dx around the
    /// mode equals -q(mode) + this value, with q the negative log-posterior.
    pub fn log_marginal_correction(&self) -> T {
        let two_pi = T::of(std::f64::consts::TAU);
        T::half() * (T::of_usize(self.dim()) * two_pi.ln() - self.log_det_hessian)
    }

    /// Draw mode + L^{-T} z with z standard normal, so the draw has
    /// covariance H^{-1} = (L L^T)^{-1}.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<T> {
        let n = self.dim();
        let z: Vec<T> = (0..n).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect();
        let x = self.chol.solve_lower_transpose(&z);
        (0..n).map(|k| self.mode[k] + x[k]).collect()
    }

    /// Dense H^{-1}; intended for diagnostics and small models.
    pub fn covariance(&self) -> DMat<T> {
        let n = self.dim();
        let mut cov = DMat::zeros(n, n);
        let mut e = vec![T::zero(); n];
        for k in 0..n {
            e[k] = T::one();
            let col = self.chol.solve(&e);
            for i in 0..n {
                cov[(i, k)] = col[i];
            }
            e[k] = T::zero();
        }
        cov
    }
}

/// Hessian by central differences of an analytic gradient; symmetrized.
/// One gradient evaluation pair per column.
pub fn hessian_fd<T: Scalar>(
    grad: &mut impl FnMut(&[T], &mut [T]),
    x: &[T],
) -> DMat<T> {
    let n = x.len();
    let base = T::of(1e-5);
    let mut h = DMat::zeros(n, n);
    let mut xp = x.to_vec();
    let mut gp = vec![T::zero(); n];
    let mut gm = vec![T::zero(); n];
    for k in 0..n {
        let step = base * (T::one() + x[k].abs());
        let orig = xp[k];
        xp[k] = orig + step;
        grad(&xp, &mut gp);
        xp[k] = orig - step;
        grad(&xp, &mut gm);
        xp[k] = orig;
        for i in 0..n {
            h[(i, k)] = (gp[i] - gm[i]) / (T::two() * step);
        }
    }
    // Symmetrize: FD noise breaks exact symmetry.
    let mut sym = DMat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            sym[(i, j)] = (h[(i, j)] + h[(j, i)]) * T::half();
        }
    }
    sym
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::{hash_tag, stream_rng};
    use approx::assert_abs_diff_eq;

    #[test]
    fn standard_normal_moments() {
        let h = DMat::identity(3);
        let g = GaussianApprox::from_hessian(vec![0.0; 3], &h).unwrap();
        assert_abs_diff_eq!(g.log_det_hessian(), 0.0, epsilon = 1e-12);
        let mut rng = stream_rng(1, &[hash_tag("laplace-std")]);
        let n = 4000;
        let mut mean = [0.0f64; 3];
        let mut var = [0.0f64; 3];
        for _ in 0..n {
            let s = g.sample(&mut rng);
            for k in 0..3 {
                mean[k] += s[k];
                var[k] += s[k] * s[k];
            }
        }
        for k in 0..3 {
            mean[k] /= n as f64;
            var[k] = var[k] / n as f64 - mean[k] * mean[k];
            assert_abs_diff_eq!(mean[k], 0.0, epsilon = 0.08);
            assert_abs_diff_eq!(var[k], 1.0, epsilon = 0.1);
        }
        // Correction for a standard normal is (n/2) ln(2 pi).
        assert_abs_diff_eq!(
            g.log_marginal_correction(),
            1.5 * (std::f64::consts::TAU).ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn correlated_precision_recovered_in_samples() {
        let h = DMat::from_rows(vec![vec![2.0, 1.0], vec![1.0, 2.0]]);
        let g = GaussianApprox::from_hessian(vec![1.0, -1.0], &h).unwrap();
        // H^{-1} = [[2/3, -1/3], [-1/3, 2/3]]
        let cov = g.covariance();
        assert_abs_diff_eq!(cov[(0, 0)], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cov[(0, 1)], -1.0 / 3.0, epsilon = 1e-12);

        let mut rng = stream_rng(2, &[hash_tag("laplace-corr")]);
        let n = 6000;
        let (mut m0, mut m1, mut c00, mut c01, mut c11) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let s = g.sample(&mut rng);
            m0 += s[0];
            m1 += s[1];
            c00 += s[0] * s[0];
            c01 += s[0] * s[1];
            c11 += s[1] * s[1];
        }
        let nf = n as f64;
        m0 /= nf;
        m1 /= nf;
        assert_abs_diff_eq!(m0, 1.0, epsilon = 0.05);
        assert_abs_diff_eq!(m1, -1.0, epsilon = 0.05);
        assert_abs_diff_eq!(c00 / nf - m0 * m0, 2.0 / 3.0, epsilon = 0.05);
        assert_abs_diff_eq!(c01 / nf - m0 * m1, -1.0 / 3.0, epsilon = 0.05);
        assert_abs_diff_eq!(c11 / nf - m1 * m1, 2.0 / 3.0, epsilon = 0.05);
    }

    #[test]
    fn singular_hessian_gets_jitter() {
        let h = DMat::from_rows(vec![vec![1.0, 1.0], vec![1.0, 1.0]]);
        let g = GaussianApprox::from_hessian(vec![0.0, 0.0], &h).unwrap();
        assert!(g.jitter > 0.0);
    }

    #[test]
    fn fd_hessian_of_polynomial() {
        // f = x^2 y + y^3: grad = (2xy, x^2 + 3y^2), H = [[2y, 2x], [2x, 6y]].
        let mut grad = |x: &[f64], g: &mut [f64]| {
            g[0] = 2.0 * x[0] * x[1];
            g[1] = x[0] * x[0] + 3.0 * x[1] * x[1];
        };
        let h = hessian_fd(&mut grad, &[1.5, -0.7]);
        assert_abs_diff_eq!(h[(0, 0)], -1.4, epsilon = 1e-6);
        assert_abs_diff_eq!(h[(0, 1)], 3.0, epsilon = 1e-6);
        assert_abs_diff_eq!(h[(1, 0)], 3.0, epsilon = 1e-6);
        assert_abs_diff_eq!(h[(1, 1)], -4.2, epsilon = 1e-6);
    }
}
