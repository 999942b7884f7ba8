//! Penalized Poisson regression: MAP fit by quasi-Newton with analytic
//! gradients, Gaussian posterior approximation from the Hessian at the mode,
//! and a Laplace approximation of the marginal likelihood used to choose
//! hyperparameters in a low-dimensional outer search.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::linalg::DMat;
use crate::models::design::{Design, Penalty};
use crate::num::Scalar;
use crate::opt::{lbfgs, nelder_mead, GaussianApprox, LbfgsOptions, NelderMeadOptions};

/// Linear predictors past this magnitude are treated as infeasible; exp would
/// overflow or the fit has diverged anyway.
const ETA_LIMIT: f64 = 300.0;

#[derive(Debug, Clone)]
pub struct MapFit {
    pub mode: Vec<f64>,
    /// Penalized negative log-likelihood at the mode.
    pub neg_objective: f64,
    pub approx: GaussianApprox<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
}

/// Negative Poisson log-likelihood (full, including the log y! constant so
/// values are comparable across hyperparameter settings).
pub fn poisson_neg_loglik(design: &Design, beta: &[f64]) -> f64 {
    let eta = design.linear_predictor(beta);
    let mut nll = 0.0;
    for (r, &e) in eta.iter().enumerate() {
        if e.abs() > ETA_LIMIT {
            return f64::INFINITY;
        }
        let y = design.y[r];
        nll += e.exp() - y * e + (y + 1.0).lgamma();
    }
    nll
}

/// Maximize the penalized Poisson log-likelihood and build the Gaussian
/// posterior approximation at the mode.
pub fn fit_poisson_map(
    design: &Design,
    penalty: &Penalty,
    x0: &[f64],
    opts: &LbfgsOptions<f64>,
) -> Result<MapFit> {
    let n_cols = design.n_cols();
    if x0.len() != n_cols {
        return Err(Error::invalid(format!(
            "starting point has {} entries, design has {} columns",
            x0.len(),
            n_cols
        )));
    }
    if design.n_obs() == 0 {
        return Err(Error::invalid("empty training window: design has no observations"));
    }

    let mut objective = |beta: &[f64], grad: &mut [f64]| -> f64 {
        let eta = design.linear_predictor(beta);
        let mut nll = 0.0;
        let mut w = vec![0.0; eta.len()];
        for (r, &e) in eta.iter().enumerate() {
            if e.abs() > ETA_LIMIT {
                return f64::INFINITY;
            }
            let mu = e.exp();
            let y = design.y[r];
            nll += mu - y * e + (y + 1.0).lgamma();
            w[r] = mu - y;
        }
        grad.fill(0.0);
        design.add_weighted_columns(&w, grad);
        penalty.add_grad(beta, grad);
        nll + penalty.quad(beta)
    };

    let res = lbfgs(&mut objective, x0.to_vec(), opts)?;

    // Hessian at the mode: X' diag(mu) X + P.
    let eta = design.linear_predictor(&res.x);
    let mu: Vec<f64> = eta.iter().map(|e| e.exp()).collect();
    let mut h = DMat::zeros(n_cols, n_cols);
    design.add_weighted_gram(&mu, &mut h);
    penalty.add_hessian(&mut h);
    let approx = GaussianApprox::from_hessian(res.x.clone(), &h)?;

    Ok(MapFit {
        mode: res.x,
        neg_objective: res.value,
        approx,
        iterations: res.iterations,
        converged: res.converged,
        grad_norm: res.grad_norm,
    })
}

/// Laplace approximation of the log marginal likelihood
/// log p(y | hyperparameters), up to the hyperprior terms:
/// log lik(mode) + log prior(mode) + Gaussian-integral correction.
pub fn log_laplace_marginal(fit: &MapFit, penalty: &Penalty) -> f64 {
    -fit.neg_objective + penalty.log_normalizer() + fit.approx.log_marginal_correction()
}

/// Result of the outer hyperparameter search.
#[derive(Debug, Clone)]
pub struct HyperFit {
    /// Transformed (unconstrained) hyperparameters at the optimum.
    pub hypers: Vec<f64>,
    pub fit: MapFit,
    pub log_posterior: f64,
    pub outer_evaluations: usize,
}

/// Options for the outer hyperparameter search.
#[derive(Debug, Clone)]
pub struct OuterOptions {
    pub nm: NelderMeadOptions<f64>,
    pub inner: LbfgsOptions<f64>,
}

impl Default for OuterOptions {
    fn default() -> Self {
        OuterOptions {
            nm: NelderMeadOptions {
                max_evals: 120,
                f_tol: 1e-4,
                init_step: 0.4,
            },
            inner: LbfgsOptions::default(),
        }
    }
}

/// Maximize the Laplace marginal over a small vector of transformed
/// hyperparameters. `rebuild` maps the transformed hypers to the penalty and
/// the log hyperprior density (including transform Jacobians). The inner MAP
/// problem is warm-started from the best mode seen so far; a final full fit
/// at the chosen hypers produces the returned posterior approximation.
pub fn maximize_laplace_marginal(
    design: &Design,
    x0: Vec<f64>,
    hyper0: Vec<f64>,
    rebuild: impl Fn(&[f64]) -> Result<(Penalty, f64)>,
    opts: &OuterOptions,
) -> Result<HyperFit> {
    if hyper0.is_empty() {
        let (penalty, log_hyper) = rebuild(&[])?;
        check_full_coverage(design, &penalty)?;
        let fit = final_fit(design, &penalty, &x0, &opts.inner)?;
        let log_posterior = log_laplace_marginal(&fit, &penalty) + log_hyper;
        return Ok(HyperFit {
            hypers: Vec::new(),
            fit,
            log_posterior,
            outer_evaluations: 1,
        });
    }

    {
        let (penalty, _) = rebuild(&hyper0)?;
        check_full_coverage(design, &penalty)?;
    }

    // Warm start shared across outer evaluations. The inner optimum does not
    // depend on the start, so this only saves iterations.
    let warm: RefCell<Vec<f64>> = RefCell::new(x0.clone());
    let probe_opts = LbfgsOptions {
        max_iters: opts.inner.max_iters,
        ..opts.inner.clone()
    };

    let mut objective = |h: &[f64]| -> f64 {
        let (penalty, log_hyper) = match rebuild(h) {
            Ok(v) => v,
            Err(_) => return f64::INFINITY,
        };
        let start = warm.borrow().clone();
        let fit = match fit_poisson_map(design, &penalty, &start, &probe_opts) {
            Ok(f) => f,
            Err(_) => return f64::INFINITY,
        };
        let lm = log_laplace_marginal(&fit, &penalty) + log_hyper;
        if lm.is_finite() {
            *warm.borrow_mut() = fit.mode;
            -lm
        } else {
            f64::INFINITY
        }
    };

    let nm = nelder_mead(&mut objective, &hyper0, &opts.nm)?;

    let (penalty, log_hyper) = rebuild(&nm.x)?;
    let start = warm.borrow().clone();
    let fit = final_fit(design, &penalty, &start, &opts.inner)?;
    let log_posterior = log_laplace_marginal(&fit, &penalty) + log_hyper;
    Ok(HyperFit {
        hypers: nm.x,
        fit,
        log_posterior,
        outer_evaluations: nm.evaluations,
    })
}

fn final_fit(
    design: &Design,
    penalty: &Penalty,
    x0: &[f64],
    opts: &LbfgsOptions<f64>,
) -> Result<MapFit> {
    let fit = fit_poisson_map(design, penalty, x0, opts)?;
    if !fit.converged {
        return Err(Error::NonConvergence(format!(
            "MAP fit stopped after {} iterations with gradient norm {:.3e}",
            fit.iterations, fit.grad_norm
        )));
    }
    Ok(fit)
}

fn check_full_coverage(design: &Design, penalty: &Penalty) -> Result<()> {
    if penalty.penalized_dim() != design.n_cols() {
        return Err(Error::invalid(format!(
            "penalty covers {} of {} design columns; the Laplace marginal needs a proper prior on every column",
            penalty.penalized_dim(),
            design.n_cols()
        )));
    }
    Ok(())
}

/// Log prior density of a half-normal(scale 1) standard deviation expressed
/// through its log, s = log(sigma), Jacobian included.
pub fn log_sd_half_normal_prior(s: f64) -> f64 {
    let sigma = s.exp();
    0.5 * (2.0 / std::f64::consts::PI).ln() - 0.5 * sigma * sigma + s
}

/// Log prior of a correlation parameter, rho = tanh(r), rho ~ Uniform(-1, 1),
/// Jacobian included.
pub fn correlation_log_prior(r: f64) -> f64 {
    let rho = r.tanh();
    (0.5f64).ln() + (1.0 - rho * rho).ln()
}

/// Log prior of a proportion, p = logistic(l), p ~ Uniform(0, 1), Jacobian
/// included.
pub fn proportion_log_prior(l: f64) -> f64 {
    let p = 1.0 / (1.0 + (-l).exp());
    (p * (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::design::PenaltyBlock;
    use crate::opt::fd_gradient;
    use approx::assert_relative_eq;

    /// Intercept-only design with given counts and unit populations.
    fn intercept_design(counts: &[f64]) -> Design {
        let mut d = Design::new(1);
        for (t, &y) in counts.iter().enumerate() {
            d.push_row(vec![(0, 1.0)], y, 0.0, (0, t));
        }
        d
    }

    fn flat_penalty(n_cols: usize) -> Penalty {
        // Very diffuse but proper, so the marginal stays defined.
        Penalty::new(vec![PenaltyBlock::Diagonal { cols: 0..n_cols, tau: 1e-8 }]).unwrap()
    }

    #[test]
    fn intercept_mle_matches_closed_form() {
        let counts = [4.0, 7.0, 5.0, 9.0, 6.0, 5.0];
        let d = intercept_design(&counts);
        let pen = flat_penalty(1);
        let fit = fit_poisson_map(&d, &pen, &[0.0], &LbfgsOptions::default()).unwrap();
        assert!(fit.converged);
        let mean = counts.iter().sum::<f64>() / counts.len() as f64;
        assert_relative_eq!(fit.mode[0], mean.ln(), epsilon = 1e-6);
        // Fisher information at the mode is sum of fitted means.
        let total: f64 = counts.iter().sum();
        assert_relative_eq!(fit.approx.log_det_hessian(), total.ln(), epsilon = 1e-5);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut d = Design::new(2);
        let xs = [0.2, -0.4, 1.0, 0.7, -1.1];
        let ys = [3.0, 1.0, 6.0, 4.0, 0.0];
        for (t, (&x, &y)) in xs.iter().zip(&ys).enumerate() {
            d.push_row(vec![(0, 1.0), (1, x)], y, 0.1, (0, t));
        }
        let pen = Penalty::new(vec![
            PenaltyBlock::Diagonal { cols: 0..1, tau: 0.04 },
            PenaltyBlock::Diagonal { cols: 1..2, tau: 1.0 },
        ])
        .unwrap();
        let beta = [0.3, -0.5];
        let mut grad = vec![0.0; 2];
        let eta = d.linear_predictor(&beta);
        let w: Vec<f64> = eta.iter().zip(&ys).map(|(e, y)| e.exp() - y).collect();
        d.add_weighted_columns(&w, &mut grad);
        pen.add_grad(&beta, &mut grad);

        let f = |b: &[f64]| poisson_neg_loglik(&d, b) + pen.quad(b);
        let fd = fd_gradient(f, &beta);
        for k in 0..2 {
            assert_relative_eq!(grad[k], fd[k], epsilon = 1e-5);
        }
    }

    #[test]
    fn ridge_penalty_shrinks_coefficient() {
        let mut d = Design::new(1);
        let xs = [1.0, -1.0, 1.0, -1.0];
        let ys = [8.0, 1.0, 9.0, 2.0];
        for (t, (&x, &y)) in xs.iter().zip(&ys).enumerate() {
            d.push_row(vec![(0, x)], y, 1.0, (0, t));
        }
        let loose = fit_poisson_map(&d, &flat_penalty(1), &[0.0], &LbfgsOptions::default()).unwrap();
        let tight_pen =
            Penalty::new(vec![PenaltyBlock::Diagonal { cols: 0..1, tau: 100.0 }]).unwrap();
        let tight = fit_poisson_map(&d, &tight_pen, &[0.0], &LbfgsOptions::default()).unwrap();
        assert!(tight.mode[0].abs() < loose.mode[0].abs() / 2.0);
    }

    #[test]
    fn laplace_marginal_close_to_quadrature_in_one_dimension() {
        // One Poisson observation, N(0, 1) prior on the log-rate: compare the
        // Laplace marginal against direct numeric integration.
        let d = intercept_design(&[3.0]);
        let pen = Penalty::new(vec![PenaltyBlock::Diagonal { cols: 0..1, tau: 1.0 }]).unwrap();
        let fit = fit_poisson_map(&d, &pen, &[0.0], &LbfgsOptions::default()).unwrap();
        let laplace = log_laplace_marginal(&fit, &pen);

        let mut grid_sum = 0.0;
        let (lo, hi, steps) = (-8.0, 8.0, 20000);
        let h = (hi - lo) / steps as f64;
        for k in 0..=steps {
            let a = lo + k as f64 * h;
            let log_joint = -(poisson_neg_loglik(&d, &[a]) + pen.quad(&[a]))
                + pen.log_normalizer();
            let w = if k == 0 || k == steps { 0.5 } else { 1.0 };
            grid_sum += w * log_joint.exp();
        }
        let numeric = (grid_sum * h).ln();
        assert_relative_eq!(laplace, numeric, epsilon = 5e-3);
    }

    #[test]
    fn outer_search_recovers_sensible_ridge_scale() {
        // Data generated from iid effects with sd ~ 1.2: the marginal should
        // prefer a hyper-sd near the truth rather than the 0.1 start.
        use crate::num::stream_rng;
        use rand_distr::{Distribution, Poisson};
        let mut rng = stream_rng(71, &[1]);
        let sd_true = 1.2;
        let n_groups = 40;
        let effects: Vec<f64> = (0..n_groups)
            .map(|_| {
                let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
                sd_true * z
            })
            .collect();
        let mut d = Design::new(n_groups);
        for (g, &u) in effects.iter().enumerate() {
            for rep in 0..6 {
                let mu = (2.0 + u).exp();
                let y = Poisson::new(mu).unwrap().sample(&mut rng);
                d.push_row(vec![(g, 1.0)], y, 2.0, (g, rep));
            }
        }
        let rebuild = |h: &[f64]| -> crate::error::Result<(Penalty, f64)> {
            let sigma = h[0].exp();
            let pen = Penalty::new(vec![PenaltyBlock::Diagonal {
                cols: 0..n_groups,
                tau: 1.0 / (sigma * sigma),
            }])?;
            Ok((pen, log_sd_half_normal_prior(h[0])))
        };
        let res = maximize_laplace_marginal(
            &d,
            vec![0.0; n_groups],
            vec![(0.1f64).ln()],
            rebuild,
            &OuterOptions::default(),
        )
        .unwrap();
        let sd_hat = res.hypers[0].exp();
        assert!(
            (0.6..2.4).contains(&sd_hat),
            "estimated effect sd {sd_hat} too far from 1.2"
        );
        assert!(res.fit.converged);
    }

    #[test]
    fn hyper_prior_transforms_integrate_to_one() {
        // Each log prior includes its Jacobian, so integrating over the
        // unconstrained scale must give 1.
        let integrate = |f: &dyn Fn(f64) -> f64, lo: f64, hi: f64| {
            let steps = 40000;
            let h = (hi - lo) / steps as f64;
            let mut s = 0.0;
            for k in 0..=steps {
                let x = lo + k as f64 * h;
                let w = if k == 0 || k == steps { 0.5 } else { 1.0 };
                s += w * f(x).exp();
            }
            s * h
        };
        assert_relative_eq!(
            integrate(&|s| log_sd_half_normal_prior(s), -12.0, 4.0),
            1.0,
            epsilon = 1e-4
        );
        assert_relative_eq!(
            integrate(&|r| correlation_log_prior(r), -12.0, 12.0),
            1.0,
            epsilon = 1e-4
        );
        assert_relative_eq!(
            integrate(&|l| proportion_log_prior(l), -16.0, 16.0),
            1.0,
            epsilon = 1e-4
        );
    }

    #[test]
    fn empty_design_rejected() {
        let d = Design::new(1);
        let pen = flat_penalty(1);
        assert!(fit_poisson_map(&d, &pen, &[0.0], &LbfgsOptions::default()).is_err());
    }
}
