//! Sparse observation design and quadratic penalties for penalized Poisson
//! regression. Random effects are reparameterized into unconstrained
//! coordinates before they reach this layer, so every penalty block here is
//! full rank and the Gaussian prior normalizer is well defined.

use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::DMat;

/// Row-sparse design. Each observation row stores only its nonzero columns;
/// `offset` carries terms with fixed unit coefficient (log population and the
/// lagged-case offset term).
#[derive(Debug, Clone)]
pub struct Design {
    n_cols: usize,
    rows: Vec<Vec<(usize, f64)>>,
    pub y: Vec<f64>,
    pub offset: Vec<f64>,
    /// (district, month index) that produced each row.
    pub obs_index: Vec<(usize, usize)>,
}

impl Design {
    pub fn new(n_cols: usize) -> Self {
        Design {
            n_cols,
            rows: Vec::new(),
            y: Vec::new(),
            offset: Vec::new(),
            obs_index: Vec::new(),
        }
    }

    pub fn n_obs(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn push_row(
        &mut self,
        entries: Vec<(usize, f64)>,
        y: f64,
        offset: f64,
        obs: (usize, usize),
    ) {
        debug_assert!(entries.iter().all(|&(c, _)| c < self.n_cols));
        self.rows.push(entries);
        self.y.push(y);
        self.offset.push(offset);
        self.obs_index.push(obs);
    }

    /// eta = offset + X beta.
    pub fn linear_predictor(&self, beta: &[f64]) -> Vec<f64> {
        assert_eq!(beta.len(), self.n_cols);
        let mut eta = self.offset.clone();
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, v) in row {
                eta[r] += v * beta[c];
            }
        }
        eta
    }

    pub fn dot_row(&self, r: usize, beta: &[f64]) -> f64 {
        let mut s = self.offset[r];
        for &(c, v) in &self.rows[r] {
            s += v * beta[c];
        }
        s
    }

    /// grad += X' w (w is a per-observation weight vector).
    pub fn add_weighted_columns(&self, w: &[f64], grad: &mut [f64]) {
        for (r, row) in self.rows.iter().enumerate() {
            let wr = w[r];
            for &(c, v) in row {
                grad[c] += v * wr;
            }
        }
    }

    /// h += X' diag(w) X, exploiting row sparsity.
    pub fn add_weighted_gram(&self, w: &[f64], h: &mut DMat<f64>) {
        assert_eq!(h.nrows(), self.n_cols);
        for (r, row) in self.rows.iter().enumerate() {
            let wr = w[r];
            if wr == 0.0 {
                continue;
            }
            for &(c1, v1) in row {
                let wv = wr * v1;
                for &(c2, v2) in row {
                    h[(c1, c2)] += wv * v2;
                }
            }
        }
    }
}

/// One block of a block-diagonal Gaussian prior precision. `tau` is the
/// precision multiplier (1 / variance for scalar blocks); hyperparameter
/// moves only touch `tau` so structure matrices are shared via `Arc`.
#[derive(Debug, Clone)]
pub enum PenaltyBlock {
    Diagonal {
        cols: Range<usize>,
        tau: f64,
    },
    Structured {
        cols: Range<usize>,
        base: Arc<DMat<f64>>,
        base_log_det: f64,
        tau: f64,
    },
}

impl PenaltyBlock {
    pub fn cols(&self) -> Range<usize> {
        match self {
            PenaltyBlock::Diagonal { cols, .. } | PenaltyBlock::Structured { cols, .. } => {
                cols.clone()
            }
        }
    }

    fn dim(&self) -> usize {
        self.cols().len()
    }

    /// log det of this block's precision matrix.
    fn log_det(&self) -> f64 {
        match self {
            PenaltyBlock::Diagonal { cols, tau } => cols.len() as f64 * tau.ln(),
            PenaltyBlock::Structured {
                cols,
                base_log_det,
                tau,
                ..
            } => base_log_det + cols.len() as f64 * tau.ln(),
        }
    }
}

/// Block-diagonal Gaussian prior expressed as a penalty on the objective.
#[derive(Debug, Clone, Default)]
pub struct Penalty {
    pub blocks: Vec<PenaltyBlock>,
}

impl Penalty {
    pub fn new(blocks: Vec<PenaltyBlock>) -> Result<Self> {
        let mut seen: Vec<Range<usize>> = Vec::new();
        for b in &blocks {
            let r = b.cols();
            if r.is_empty() {
                return Err(Error::invalid("empty penalty block"));
            }
            for s in &seen {
                if r.start < s.end && s.start < r.end {
                    return Err(Error::invalid(format!(
                        "overlapping penalty blocks {:?} and {:?}",
                        s, r
                    )));
                }
            }
            seen.push(r);
        }
        Ok(Penalty { blocks })
    }

    /// 1/2 beta' P beta.
    pub fn quad(&self, beta: &[f64]) -> f64 {
        let mut q = 0.0;
        for b in &self.blocks {
            match b {
                PenaltyBlock::Diagonal { cols, tau } => {
                    let s: f64 = beta[cols.clone()].iter().map(|v| v * v).sum();
                    q += 0.5 * tau * s;
                }
                PenaltyBlock::Structured { cols, base, tau, .. } => {
                    let x = &beta[cols.clone()];
                    let mut s = 0.0;
                    for (i, xi) in x.iter().enumerate() {
                        let row = base.row(i);
                        let mut acc = 0.0;
                        for (j, xj) in x.iter().enumerate() {
                            acc += row[j] * xj;
                        }
                        s += xi * acc;
                    }
                    q += 0.5 * tau * s;
                }
            }
        }
        q
    }

    /// grad += P beta.
    pub fn add_grad(&self, beta: &[f64], grad: &mut [f64]) {
        for b in &self.blocks {
            match b {
                PenaltyBlock::Diagonal { cols, tau } => {
                    for c in cols.clone() {
                        grad[c] += tau * beta[c];
                    }
                }
                PenaltyBlock::Structured { cols, base, tau, .. } => {
                    let x = &beta[cols.clone()];
                    for i in 0..x.len() {
                        let row = base.row(i);
                        let mut acc = 0.0;
                        for (j, xj) in x.iter().enumerate() {
                            acc += row[j] * xj;
                        }
                        grad[cols.start + i] += tau * acc;
                    }
                }
            }
        }
    }

    /// h += P.
    pub fn add_hessian(&self, h: &mut DMat<f64>) {
        for b in &self.blocks {
            match b {
                PenaltyBlock::Diagonal { cols, tau } => {
                    for c in cols.clone() {
                        h[(c, c)] += tau;
                    }
                }
                PenaltyBlock::Structured { cols, base, tau, .. } => {
                    for i in 0..cols.len() {
                        for j in 0..cols.len() {
                            h[(cols.start + i, cols.start + j)] += tau * base[(i, j)];
                        }
                    }
                }
            }
        }
    }

    /// log of the Gaussian prior normalizing constant over the penalized
    /// columns: sum over blocks of (log det P_b - k_b log 2pi) / 2. Needed by
    /// the Laplace marginal so hyperparameters can be compared fairly.
    pub fn log_normalizer(&self) -> f64 {
        let two_pi = 2.0 * std::f64::consts::PI;
        self.blocks
            .iter()
            .map(|b| 0.5 * (b.log_det() - b.dim() as f64 * two_pi.ln()))
            .sum()
    }

    pub fn penalized_dim(&self) -> usize {
        self.blocks.iter().map(|b| b.dim()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::opt::fd_gradient;
    use approx::assert_relative_eq;

    fn toy_design() -> Design {
        let mut d = Design::new(3);
        d.push_row(vec![(0, 1.0), (2, 2.0)], 3.0, 0.5, (0, 0));
        d.push_row(vec![(1, -1.0)], 1.0, 0.0, (0, 1));
        d.push_row(vec![(0, 1.0), (1, 1.0), (2, 1.0)], 0.0, -0.5, (1, 0));
        d
    }

    #[test]
    fn linear_predictor_matches_dense_multiply() {
        let d = toy_design();
        let beta = [0.3, -0.2, 0.1];
        let eta = d.linear_predictor(&beta);
        assert_relative_eq!(eta[0], 0.5 + 0.3 + 0.2, epsilon = 1e-14);
        assert_relative_eq!(eta[1], 0.2, epsilon = 1e-14);
        assert_relative_eq!(eta[2], -0.5 + 0.3 - 0.2 + 0.1, epsilon = 1e-14);
        for r in 0..3 {
            assert_relative_eq!(d.dot_row(r, &beta), eta[r], epsilon = 1e-14);
        }
    }

    #[test]
    fn weighted_gram_matches_dense_computation() {
        let d = toy_design();
        let w = [2.0, 1.0, 0.5];
        let dense = [
            [1.0, 0.0, 2.0_f64],
            [0.0, -1.0, 0.0],
            [1.0, 1.0, 1.0],
        ];
        let mut h = DMat::zeros(3, 3);
        d.add_weighted_gram(&w, &mut h);
        for a in 0..3 {
            for b in 0..3 {
                let want: f64 = (0..3).map(|r| w[r] * dense[r][a] * dense[r][b]).sum();
                assert_relative_eq!(h[(a, b)], want, epsilon = 1e-14);
            }
        }

        let mut g = vec![0.0; 3];
        d.add_weighted_columns(&w, &mut g);
        for a in 0..3 {
            let want: f64 = (0..3).map(|r| w[r] * dense[r][a]).sum();
            assert_relative_eq!(g[a], want, epsilon = 1e-14);
        }
    }

    #[test]
    fn penalty_quad_grad_hessian_consistent() {
        let base = DMat::from_rows(vec![vec![2.0, -1.0], vec![-1.0, 2.0]]);
        let base_log_det = 3.0_f64.ln();
        let pen = Penalty::new(vec![
            PenaltyBlock::Diagonal { cols: 0..2, tau: 0.5 },
            PenaltyBlock::Structured {
                cols: 2..4,
                base: Arc::new(base),
                base_log_det,
                tau: 2.0,
            },
        ])
        .unwrap();
        let beta = [0.7, -0.3, 0.2, 0.9];

        let quad = pen.quad(&beta);
        let want = 0.5 * 0.5 * (0.49 + 0.09)
            + 0.5 * 2.0 * (2.0 * 0.04 - 2.0 * 0.2 * 0.9 + 2.0 * 0.81);
        assert_relative_eq!(quad, want, epsilon = 1e-12);

        let mut grad = vec![0.0; 4];
        pen.add_grad(&beta, &mut grad);
        let fd = fd_gradient(|x: &[f64]| pen.quad(x), &beta);
        for k in 0..4 {
            assert_relative_eq!(grad[k], fd[k], epsilon = 1e-6);
        }

        // Hessian of the quadratic form is the precision itself.
        let mut h = DMat::zeros(4, 4);
        pen.add_hessian(&mut h);
        assert_relative_eq!(h[(0, 0)], 0.5, epsilon = 1e-14);
        assert_relative_eq!(h[(2, 3)], -2.0, epsilon = 1e-14);
        assert_relative_eq!(h[(3, 3)], 4.0, epsilon = 1e-14);
    }

    #[test]
    fn log_normalizer_matches_gaussian_constant() {
        // Diagonal tau on k columns: the normalizer is k/2 log(tau/2pi).
        let pen = Penalty::new(vec![PenaltyBlock::Diagonal { cols: 0..3, tau: 4.0 }]).unwrap();
        let want = 1.5 * (4.0_f64.ln() - (2.0 * std::f64::consts::PI).ln());
        assert_relative_eq!(pen.log_normalizer(), want, epsilon = 1e-12);
    }

    #[test]
    fn overlapping_blocks_rejected() {
        let r = Penalty::new(vec![
            PenaltyBlock::Diagonal { cols: 0..2, tau: 1.0 },
            PenaltyBlock::Diagonal { cols: 1..3, tau: 1.0 },
        ]);
        assert!(r.is_err());
    }
}
