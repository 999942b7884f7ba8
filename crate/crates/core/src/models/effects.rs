//! Structure matrices for the random effects: cyclic month random walks,
//! Besag spatial smoothing, and stationary AR(1) year effects.
//!
//! Rank-deficient structures (RW1, Besag) carry an implicit sum-to-zero
//! constraint. Instead of projecting iterates, the effect is reparameterized
//! as eta = B gamma where B is an orthonormal basis of the sum-zero subspace,
//! so the reduced precision is full rank and the optimizer runs
//! unconstrained. Structures are scaled so that at unit hyper-sd the typical
//! (geometric mean) marginal variance of the effect is 1, which keeps one
//! prior scale meaningful across structures of different sizes.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{jacobi_eigh, Cholesky, DMat};
use crate::panel::AdjacencyGraph;

/// Orthonormal basis of the subspace of R^k orthogonal to the all-ones
/// vector, as the k x (k-1) matrix of Helmert contrasts.
pub fn helmert_basis(k: usize) -> DMat<f64> {
    assert!(k >= 2);
    DMat::from_fn(k, k - 1, |i, j| {
        let m = (j + 1) as f64;
        let norm = (m * (m + 1.0)).sqrt();
        if i < j + 1 {
            1.0 / norm
        } else if i == j + 1 {
            -m / norm
        } else {
            0.0
        }
    })
}

/// A sum-to-zero random effect in reduced coordinates.
#[derive(Debug, Clone)]
pub struct EffectStructure {
    /// k_full x (k_full - 1); maps reduced coordinates to the effect vector.
    pub basis: DMat<f64>,
    /// Reduced precision at unit hyper-sd; always positive definite.
    pub reduced: Arc<DMat<f64>>,
    /// log det of `reduced`.
    pub log_det: f64,
    /// Multiplier applied to the raw structure during variance scaling.
    pub scale: f64,
}

impl EffectStructure {
    pub fn dim_full(&self) -> usize {
        self.basis.nrows()
    }

    pub fn dim_reduced(&self) -> usize {
        self.basis.ncols()
    }

    /// Design-row weights of level `i` over the reduced columns.
    pub fn basis_row(&self, i: usize) -> &[f64] {
        self.basis.row(i)
    }

    /// Effect vector for reduced coordinates `gamma`.
    pub fn expand(&self, gamma: &[f64]) -> Vec<f64> {
        self.basis.matvec(gamma)
    }

    /// Covariance of the effect at unit hyper-sd: B R^-1 B'. Dense; for
    /// diagnostics and tests.
    pub fn marginal_covariance(&self) -> DMat<f64> {
        let k = self.dim_full();
        let r = self.dim_reduced();
        let chol = Cholesky::new(&self.reduced).expect("reduced precision is PD");
        // Columns of R^-1 B'.
        let mut solved = DMat::zeros(r, k);
        for i in 0..k {
            let col = self.basis.row(i).to_vec();
            let s = chol.solve(&col);
            for j in 0..r {
                solved[(j, i)] = s[j];
            }
        }
        DMat::from_fn(k, k, |a, b| {
            (0..r).map(|j| self.basis[(a, j)] * solved[(j, b)]).sum()
        })
    }

    fn from_raw_structure(q: DMat<f64>) -> Result<Self> {
        let k = q.nrows();
        if k < 2 {
            return Err(Error::invalid("structured effect needs at least 2 levels"));
        }
        let scale = geometric_mean_marginal_variance(&q)?;
        let basis = helmert_basis(k);
        let reduced = DMat::from_fn(k - 1, k - 1, |a, b| {
            let mut s = 0.0;
            for i in 0..k {
                let mut qi = 0.0;
                for j in 0..k {
                    qi += q[(i, j)] * basis[(j, b)];
                }
                s += basis[(i, a)] * qi;
            }
            s * scale
        });
        let chol = Cholesky::new(&reduced)
            .map_err(|_| Error::numeric("reduced effect precision not positive definite"))?;
        let log_det = chol.log_det();
        Ok(EffectStructure {
            basis,
            reduced: Arc::new(reduced),
            log_det,
            scale,
        })
    }
}

/// Geometric mean of the marginal variances of the intrinsic model, i.e. of
/// the diagonal of the pseudo-inverse of `q`. Multiplying `q` by this value
/// normalizes the typical marginal variance to 1.
fn geometric_mean_marginal_variance(q: &DMat<f64>) -> Result<f64> {
    let k = q.nrows();
    let (eigvals, eigvecs) = jacobi_eigh(q);
    let max_eig = eigvals[0];
    if !(max_eig > 0.0) {
        return Err(Error::numeric("effect structure has no positive eigenvalues"));
    }
    let tol = max_eig * 1e-10 * k as f64;
    let mut log_sum = 0.0;
    for i in 0..k {
        let mut var = 0.0;
        for (e, &lam) in eigvals.iter().enumerate() {
            if lam > tol {
                let v = eigvecs[(i, e)];
                var += v * v / lam;
            }
        }
        if !(var > 0.0) {
            return Err(Error::numeric("degenerate marginal variance in effect structure"));
        }
        log_sum += var.ln();
    }
    Ok((log_sum / k as f64).exp())
}

/// Cyclic first-order random walk over `k` levels (calendar months use
/// k = 12). The raw structure is the circulant second-difference matrix of
/// rank k - 1.
pub fn cyclic_rw1(k: usize) -> Result<EffectStructure> {
    if k < 3 {
        return Err(Error::invalid("cyclic random walk needs at least 3 levels"));
    }
    let q = DMat::from_fn(k, k, |i, j| {
        if i == j {
            2.0
        } else if (i + 1) % k == j || (j + 1) % k == i {
            -1.0
        } else {
            0.0
        }
    });
    EffectStructure::from_raw_structure(q)
}

/// Besag intrinsic CAR on the district adjacency graph: raw structure is the
/// graph Laplacian, rank n - 1 on a connected graph.
pub fn besag(graph: &AdjacencyGraph) -> Result<EffectStructure> {
    let n = graph.n_districts();
    if n < 2 {
        return Err(Error::invalid("Besag effect needs at least 2 districts"));
    }
    let q = DMat::from_fn(n, n, |i, j| {
        if i == j {
            graph.degree(i) as f64
        } else if graph.neighbors(i).contains(&j) {
            -1.0
        } else {
            0.0
        }
    });
    EffectStructure::from_raw_structure(q)
}

/// Precision of a stationary AR(1) with unit marginal variance and lag-one
/// correlation `rho`, over `m` consecutive levels. Full rank for |rho| < 1.
pub fn ar1_precision(m: usize, rho: f64) -> Result<DMat<f64>> {
    if m == 0 {
        return Err(Error::invalid("AR(1) effect needs at least 1 level"));
    }
    if !(-1.0 < rho && rho < 1.0) {
        return Err(Error::invalid(format!("AR(1) coefficient {rho} outside (-1, 1)")));
    }
    let s = 1.0 / (1.0 - rho * rho);
    Ok(DMat::from_fn(m, m, |i, j| {
        if i == j {
            if m == 1 {
                1.0
            } else if i == 0 || i == m - 1 {
                s
            } else {
                s * (1.0 + rho * rho)
            }
        } else if i.abs_diff(j) == 1 {
            -s * rho
        } else {
            0.0
        }
    }))
}

/// log det of `ar1_precision(m, rho)`: the covariance determinant is
/// (1 - rho^2)^(m-1).
pub fn ar1_log_det(m: usize, rho: f64) -> f64 {
    -((m.saturating_sub(1)) as f64) * (1.0 - rho * rho).ln()
}
