//! Minimal dense linear algebra, generic over the scalar type.
//!
//! Covers exactly what the fitting and interpolation code needs: symmetric
//! factorization with jitter retry, a pivoted LU for saddle-point systems,
//! and a Jacobi eigendecomposition for PCA-sized symmetric matrices.

use crate::error::{Error, Result};
use crate::num::Scalar;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DMat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> DMat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DMat { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    pub fn from_rows(rows: Vec<Vec<T>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        DMat { rows: r, cols: c, data: rows.into_iter().flatten().collect() }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matvec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(&a, &b)| a * b).sum())
            .collect()
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows);
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    /// self += scale * other
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn max_abs_diag(&self) -> T {
        let n = self.rows.min(self.cols);
        (0..n).map(|i| self[(i, i)].abs()).fold(T::zero(), T::max)
    }
}

impl<T> std::ops::Index<(usize, usize)> for DMat<T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for DMat<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    l: DMat<T>,
}

impl<T: Scalar> Cholesky<T> {
    /// Factor a symmetric positive definite matrix; fails on non-PD input.
    pub fn new(a: &DMat<T>) -> Result<Self> {
        assert_eq!(a.nrows(), a.ncols());
        let n = a.nrows();
        let mut l = DMat::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s = s - l[(i, k)] * l[(j, k)];
                }
                if i == j {
                    if s <= T::zero() || !s.is_finite() {
                        return Err(Error::numeric(format!(
                            "cholesky: non-positive pivot {s} at index {i}"
                        )));
                    }
                    l[(i, j)] = s.sqrt();
                } else {
                    l[(i, j)] = s / l[(j, j)];
                }
            }
        }
        Ok(Cholesky { l })
    }

    /// Factor with escalating diagonal jitter; returns the factor and the
    /// jitter that was needed (zero if none).
    pub fn with_jitter(a: &DMat<T>, max_tries: usize) -> Result<(Self, T)> {
        if let Ok(c) = Self::new(a) {
            return Ok((c, T::zero()));
        }
        let scale = a.max_abs_diag().max(T::one());
        let mut jitter = T::of(1e-10) * scale;
        for _ in 0..max_tries {
            let mut b = a.clone();
            for i in 0..a.nrows() {
                b[(i, i)] += jitter;
            }
            if let Ok(c) = Self::new(&b) {
                return Ok((c, jitter));
            }
            jitter = jitter * T::of(10.0);
        }
        Err(Error::numeric("cholesky: matrix not positive definite after jitter retries"))
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn l(&self) -> &DMat<T> {
        &self.l
    }

    /// Solve L x = b.
    pub fn solve_lower(&self, b: &[T]) -> Vec<T> {
        let n = self.dim();
        let mut x = b.to_vec();
        for i in 0..n {
            for k in 0..i {
                let lik = self.l[(i, k)];
                x[i] = x[i] - lik * x[k];
            }
            x[i] = x[i] / self.l[(i, i)];
        }
        x
    }

    /// Solve L^T x = b.
    pub fn solve_lower_transpose(&self, b: &[T]) -> Vec<T> {
        let n = self.dim();
        let mut x = b.to_vec();
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                let lki = self.l[(k, i)];
                x[i] = x[i] - lki * x[k];
            }
            x[i] = x[i] / self.l[(i, i)];
        }
        x
    }

    /// Solve A x = b with A = L L^T.
    pub fn solve(&self, b: &[T]) -> Vec<T> {
        self.solve_lower_transpose(&self.solve_lower(b))
    }

    /// log det A = 2 sum log L_ii.
    pub fn log_det(&self) -> T {
        (0..self.dim()).map(|i| self.l[(i, i)].ln()).sum::<T>() * T::two()
    }
}

/// Solve a general square system by LU with partial pivoting.
///
/// Used for the ordinary-kriging saddle system, which is symmetric indefinite.
pub fn lu_solve<T: Scalar>(a: &DMat<T>, b: &[T]) -> Result<Vec<T>> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    assert_eq!(n, b.len());
    let mut lu = a.clone();
    let mut x = b.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();

    for col in 0..n {
        let (pivot_row, pivot_val) = (col..n)
            .map(|r| (r, lu[(r, col)].abs()))
            .fold((col, T::zero()), |best, cand| if cand.1 > best.1 { cand } else { best });
        if pivot_val <= T::epsilon() * T::of(16.0) || !pivot_val.is_finite() {
            return Err(Error::numeric(format!("lu_solve: singular pivot at column {col}")));
        }
        if pivot_row != col {
            for j in 0..n {
                let tmp = lu[(col, j)];
                lu[(col, j)] = lu[(pivot_row, j)];
                lu[(pivot_row, j)] = tmp;
            }
            perm.swap(col, pivot_row);
            x.swap(col, pivot_row);
        }
        let piv = lu[(col, col)];
        for r in (col + 1)..n {
            let f = lu[(r, col)] / piv;
            lu[(r, col)] = f;
            for j in (col + 1)..n {
                let v = lu[(col, j)];
                lu[(r, j)] = lu[(r, j)] - f * v;
            }
            x[r] = x[r] - f * x[col];
        }
    }
    // Back substitution on U.
    for i in (0..n).rev() {
        for j in (i + 1)..n {
            let u = lu[(i, j)];
            x[i] = x[i] - u * x[j];
        }
        x[i] = x[i] / lu[(i, i)];
    }
    Ok(x)
}

/// Symmetric eigendecomposition by the cyclic Jacobi method.
///
/// Returns eigenvalues sorted descending with matching eigenvector columns.
pub fn jacobi_eigh<T: Scalar>(a: &DMat<T>) -> (Vec<T>, DMat<T>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let mut m = a.clone();
    let mut v = DMat::identity(n);
    let tol = T::epsilon() * T::of(64.0);

    for _sweep in 0..100 {
        let mut off = T::zero();
        for i in 0..n {
            for j in (i + 1)..n {
                off = off + m[(i, j)] * m[(i, j)];
            }
        }
        let scale = m.max_abs_diag().max(T::one());
        if off.sqrt() <= tol * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() <= tol * scale * T::of(1e-3) {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (T::two() * apq);
                let t = {
                    let s = if theta >= T::zero() { T::one() } else { -T::one() };
                    s / (theta.abs() + (theta * theta + T::one()).sqrt())
                };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].partial_cmp(&m[(i, i)]).expect("finite eigenvalues"));
    let eigvals: Vec<T> = order.iter().map(|&i| m[(i, i)]).collect();
    let eigvecs = DMat::from_fn(n, n, |r, c| v[(r, order[c])]);
    (eigvals, eigvecs)
}
