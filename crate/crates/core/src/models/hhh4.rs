//! Endemic-epidemic negative-binomial family. The mean count decomposes as
//!
//! ```text
//! mu_{i,t} = nu_{i,t} + lambda_{i,t} Y_{i,t-1} + phi_{i,t} sum_{j!=i} w_{j,i} Y_{j,t-1}
//! ```
//!
//! with Y ~ NegBin(mu, psi), Var = mu + mu^2/psi. Each component carries a
//! log-linear predictor (intercept, optional per-district effects, optional
//! covariates; the endemic part adds an annual harmonic pair and a population
//! exposure). Spatial weights follow a power law in neighbourhood order,
//! normalized per target district. Everything, including the decay d and the
//! dispersion psi, is estimated jointly by penalized maximum likelihood;
//! multi-month forecasts feed sampled counts back into the autoregression.

use std::ops::Range;

use rand_distr::{Distribution, Gamma, Poisson};
use serde_json::json;

use crate::calendar::YearMonth;
use crate::error::{Error, Result};
use crate::linalg::DMat;
use crate::models::design::{Penalty, PenaltyBlock};
use crate::models::{
    FitDiagnostics, FittedInner, FittedModel, ForecastDistribution, Hhh4Options, ModelSpec,
};
use crate::num::{hash_tag, stream_rng, Scalar};
use crate::opt::{hessian_fd, lbfgs, GaussianApprox, LbfgsOptions};
use crate::panel::{
    cumulative_incidence, lag_feature, standardize, AdjacencyGraph, FeatureMatrix, PanelDataset,
};
use crate::Matrix;

/// Linear predictors beyond this magnitude mark the point infeasible.
const LIN_LIMIT: f64 = 30.0;
/// Cap on component linear predictors during predictive sampling.
const SAMPLE_LIN_CAP: f64 = 25.0;

/// One component's log-linear coefficients. Empty `district` or `betas`
/// means the term is absent; `harmonics` is the annual sine/cosine pair.
#[derive(Debug, Clone, Default)]
pub struct ComponentParams {
    pub intercept: f64,
    pub district: Vec<f64>,
    pub harmonics: Option<(f64, f64)>,
    pub betas: Vec<f64>,
}

impl ComponentParams {
    /// Linear predictor at (district, month); None when a covariate is
    /// masked there.
    fn linear(&self, features: &[FeatureMatrix], sin: f64, cos: f64, i: usize, t: usize) -> Option<f64> {
        let mut v = self.intercept;
        if !self.district.is_empty() {
            v += self.district[i];
        }
        if let Some((gs, gc)) = self.harmonics {
            v += gs * sin + gc * cos;
        }
        for (b, f) in self.betas.iter().zip(features) {
            v += b * f.get(i, t)?;
        }
        Some(v)
    }
}

/// Full parameter set, fitted or hand-set. `opts` and `train_end` pin the
/// covariate construction so the decomposition is reproducible from a panel.
#[derive(Debug, Clone)]
pub struct Hhh4Params {
    pub opts: Hhh4Options,
    pub train_end: usize,
    pub endemic: ComponentParams,
    pub epidemic: ComponentParams,
    pub neighbourhood: ComponentParams,
    /// Power-law decay d > 0.
    pub decay: f64,
    /// Negative-binomial dispersion psi > 0.
    pub dispersion: f64,
}

/// Power-law spatial weights: w_{j,i} proportional to o_{ji}^{-d} for j != i,
/// normalized so each target column sums to 1; zero diagonal. Entry (j, i)
/// weighs source district j on target i.
pub fn powerlaw_weights(graph: &AdjacencyGraph, d: f64) -> Result<Matrix> {
    if !(d > 0.0 && d.is_finite()) {
        return Err(Error::invalid(format!("power-law decay must be positive, got {d}")));
    }
    let n = graph.n_districts();
    let mut w = DMat::zeros(n, n);
    for i in 0..n {
        let mut sum = 0.0;
        for j in 0..n {
            if j != i {
                let o = f64::from(graph.order(j, i));
                let v = o.powf(-d);
                w[(j, i)] = v;
                sum += v;
            }
        }
        if sum > 0.0 {
            for j in 0..n {
                w[(j, i)] /= sum;
            }
        }
    }
    Ok(w)
}

/// Mean decomposition at (district, month): (endemic, epidemic,
/// neighbourhood, total), each non-negative, summing exactly to the total.
/// Needs the previous month, so t >= 1.
pub fn mean_decomposition(
    params: &Hhh4Params,
    panel: &PanelDataset,
    i: usize,
    t: usize,
) -> Result<(f64, f64, f64, f64)> {
    if t == 0 || t >= panel.n_months() {
        return Err(Error::invalid(format!(
            "decomposition needs 1 <= t < {}, got {t}",
            panel.n_months()
        )));
    }
    let features = build_features(&params.opts, panel, params.train_end)?;
    let weights = powerlaw_weights(panel.adjacency(), params.decay)?;
    let n = panel.n_districts();
    let y_prev: Vec<f64> = (0..n).map(|j| f64::from(panel.cases(j, t - 1))).collect();
    let phase = phase_angle(panel.month_at(t));
    decompose(
        params,
        &features,
        &weights,
        &y_prev,
        panel.population(i, t) / 1e5,
        phase.sin(),
        phase.cos(),
        i,
        t,
    )
    .ok_or_else(|| Error::missing(format!("covariate undefined at district {i}, month index {t}")))
}

fn phase_angle(ym: YearMonth) -> f64 {
    2.0 * std::f64::consts::PI * (ym.phase().rem_euclid(12)) as f64 / 12.0
}

#[allow(clippy::too_many_arguments)]
fn decompose(
    params: &Hhh4Params,
    features: &Hhh4Features,
    weights: &Matrix,
    y_prev: &[f64],
    exposure: f64,
    sin: f64,
    cos: f64,
    i: usize,
    t: usize,
) -> Option<(f64, f64, f64, f64)> {
    let nu = exposure * params.endemic.linear(&features.endemic, sin, cos, i, t)?.exp();
    let lambda = params.epidemic.linear(&features.epidemic, sin, cos, i, t)?.exp();
    let phi = params.neighbourhood.linear(&features.neighbourhood, sin, cos, i, t)?.exp();
    let z: f64 = (0..y_prev.len()).map(|j| weights[(j, i)] * y_prev[j]).sum();
    let ar = lambda * y_prev[i];
    let ne = phi * z;
    Some((nu, ar, ne, nu + ar + ne))
}

/// Covariate bundles per component, on the panel timeline they were built
/// from.
pub(crate) struct Hhh4Features {
    endemic: Vec<FeatureMatrix>,
    epidemic: Vec<FeatureMatrix>,
    neighbourhood: Vec<FeatureMatrix>,
}

fn build_features(
    opts: &Hhh4Options,
    panel: &PanelDataset,
    train_end: usize,
) -> Result<Hhh4Features> {
    if train_end == 0 || train_end > panel.n_months() {
        return Err(Error::invalid(format!(
            "training window end {train_end} outside panel of {} months",
            panel.n_months()
        )));
    }
    let build_set = |covs: &[crate::models::CovariateSpec], cumulative: bool| -> Result<Vec<FeatureMatrix>> {
        let mut out = Vec::new();
        for c in covs {
            let raw = FeatureMatrix::from_covariate(&c.name, panel).ok_or_else(|| {
                Error::invalid(format!("covariate {:?} not in the panel", c.name))
            })?;
            let mut std = standardize(&lag_feature(&raw, c.lag)?, 0..train_end)?;
            std.name = format!("{}_lag{}", c.name, c.lag);
            out.push(std);
        }
        if cumulative {
            let base = cumulative_incidence(panel, opts.cumulative_window)?;
            let mut shifted = lag_feature(&base, opts.cumulative_lag.saturating_sub(1))?;
            shifted.name = format!("cum_incidence_{}m", opts.cumulative_window);
            out.push(shifted);
        }
        Ok(out)
    };
    Ok(Hhh4Features {
        endemic: build_set(&opts.endemic_covariates, opts.endemic_cumulative)?,
        epidemic: build_set(&opts.epidemic_covariates, opts.epidemic_cumulative)?,
        neighbourhood: build_set(&opts.neighbourhood_covariates, false)?,
    })
}

#[derive(Debug, Clone)]
struct CompLayout {
    intercept: usize,
    district: Option<Range<usize>>,
    harmonics: Option<(usize, usize)>,
    betas: Range<usize>,
}

#[derive(Debug, Clone)]
struct Hhh4Layout {
    endemic: CompLayout,
    epidemic: CompLayout,
    neighbourhood: CompLayout,
    log_decay: usize,
    log_dispersion: usize,
    dim: usize,
    names: Vec<String>,
}

fn build_layout(opts: &Hhh4Options, features: &Hhh4Features, districts: &[String]) -> Hhh4Layout {
    let mut names: Vec<String> = Vec::new();
    let comp = |prefix: &str,
                    district_effects: bool,
                    harmonics: bool,
                    feats: &[FeatureMatrix],
                    names: &mut Vec<String>| {
        let intercept = names.len();
        names.push(format!("{prefix}_intercept"));
        let district = if district_effects {
            let start = names.len();
            for d in districts {
                names.push(format!("{prefix}_district_{d}"));
            }
            Some(start..names.len())
        } else {
            None
        };
        let harmonics = if harmonics {
            let s = names.len();
            names.push(format!("{prefix}_sin"));
            names.push(format!("{prefix}_cos"));
            Some((s, s + 1))
        } else {
            None
        };
        let beta_start = names.len();
        for f in feats {
            names.push(format!("{prefix}_{}", f.name));
        }
        CompLayout { intercept, district, harmonics, betas: beta_start..names.len() }
    };
    let endemic = comp("nu", opts.endemic_district_effects, true, &features.endemic, &mut names);
    let epidemic =
        comp("lambda", opts.epidemic_district_effects, false, &features.epidemic, &mut names);
    let neighbourhood = comp(
        "phi",
        opts.neighbourhood_district_effects,
        false,
        &features.neighbourhood,
        &mut names,
    );
    let log_decay = names.len();
    names.push("log_decay".into());
    let log_dispersion = names.len();
    names.push("log_dispersion".into());
    Hhh4Layout {
        endemic,
        epidemic,
        neighbourhood,
        log_decay,
        log_dispersion,
        dim: names.len(),
        names,
    }
}

fn build_penalty(layout: &Hhh4Layout) -> Result<Penalty> {
    let mut blocks = Vec::new();
    for comp in [&layout.endemic, &layout.epidemic, &layout.neighbourhood] {
        blocks.push(PenaltyBlock::Diagonal {
            cols: comp.intercept..comp.intercept + 1,
            tau: 1.0 / 25.0,
        });
        if let Some(r) = &comp.district {
            if !r.is_empty() {
                blocks.push(PenaltyBlock::Diagonal { cols: r.clone(), tau: 1.0 });
            }
        }
        if let Some((s, c)) = comp.harmonics {
            blocks.push(PenaltyBlock::Diagonal { cols: s..c + 1, tau: 1.0 });
        }
        if !comp.betas.is_empty() {
            blocks.push(PenaltyBlock::Diagonal { cols: comp.betas.clone(), tau: 1.0 });
        }
    }
    blocks.push(PenaltyBlock::Diagonal { cols: layout.log_decay..layout.log_decay + 1, tau: 1.0 / 25.0 });
    blocks.push(PenaltyBlock::Diagonal {
        cols: layout.log_dispersion..layout.log_dispersion + 1,
        tau: 1.0 / 25.0,
    });
    Penalty::new(blocks)
}

fn unpack_component(theta: &[f64], lay: &CompLayout) -> ComponentParams {
    ComponentParams {
        intercept: theta[lay.intercept],
        district: lay.district.clone().map(|r| theta[r].to_vec()).unwrap_or_default(),
        harmonics: lay.harmonics.map(|(s, c)| (theta[s], theta[c])),
        betas: theta[lay.betas.clone()].to_vec(),
    }
}

fn unpack(theta: &[f64], layout: &Hhh4Layout, opts: &Hhh4Options, train_end: usize) -> Hhh4Params {
    Hhh4Params {
        opts: opts.clone(),
        train_end,
        endemic: unpack_component(theta, &layout.endemic),
        epidemic: unpack_component(theta, &layout.epidemic),
        neighbourhood: unpack_component(theta, &layout.neighbourhood),
        decay: theta[layout.log_decay].exp(),
        dispersion: theta[layout.log_dispersion].exp(),
    }
}

/// Static per-fit evaluation context.
struct ObjectiveCtx<'a> {
    layout: &'a Hhh4Layout,
    penalty: &'a Penalty,
    features: &'a Hhh4Features,
    /// (i, t) cells entering the likelihood.
    rows: &'a [(usize, usize)],
    /// cases[i][t] over the training prefix.
    cases: &'a [Vec<f64>],
    exposure: &'a [Vec<f64>],
    sin: &'a [f64],
    cos: &'a [f64],
    /// ln of neighbourhood orders, 0 on the diagonal.
    ln_order: &'a Matrix,
    n: usize,
}

fn component_linear(
    theta: &[f64],
    lay: &CompLayout,
    features: &[FeatureMatrix],
    sin: f64,
    cos: f64,
    i: usize,
    t: usize,
) -> Option<f64> {
    let mut v = theta[lay.intercept];
    if let Some(r) = &lay.district {
        v += theta[r.start + i];
    }
    if let Some((s, c)) = lay.harmonics {
        v += theta[s] * sin + theta[c] * cos;
    }
    for (k, f) in features.iter().enumerate() {
        v += theta[lay.betas.start + k] * f.get(i, t)?;
    }
    Some(v)
}

fn add_component_grad(
    grad: &mut [f64],
    lay: &CompLayout,
    features: &[FeatureMatrix],
    sin: f64,
    cos: f64,
    i: usize,
    t: usize,
    coef: f64,
) {
    grad[lay.intercept] += coef;
    if let Some(r) = &lay.district {
        grad[r.start + i] += coef;
    }
    if let Some((s, c)) = lay.harmonics {
        grad[s] += coef * sin;
        grad[c] += coef * cos;
    }
    for (k, f) in features.iter().enumerate() {
        grad[lay.betas.start + k] += coef * f.raw(i, t);
    }
}

/// Penalized negative log-likelihood; writes the analytic gradient when
/// given. Returns +inf off the feasible region.
fn neg_objective(theta: &[f64], grad: Option<&mut [f64]>, ctx: &ObjectiveCtx<'_>) -> f64 {
    let lay = ctx.layout;
    let log_d = theta[lay.log_decay];
    let log_psi = theta[lay.log_dispersion];
    if log_d.abs() > 8.0 || log_psi.abs() > 16.0 {
        return f64::INFINITY;
    }
    let d = log_d.exp();
    let psi = log_psi.exp();
    let n = ctx.n;

    // Weights and decay sensitivities for the current d.
    let mut w = DMat::zeros(n, n);
    let mut col_b = vec![0.0; n];
    for i in 0..n {
        let mut sum = 0.0;
        for j in 0..n {
            if j != i {
                let v = (-d * ctx.ln_order[(j, i)]).exp();
                w[(j, i)] = v;
                sum += v;
            }
        }
        if sum > 0.0 {
            let mut b = 0.0;
            for j in 0..n {
                w[(j, i)] /= sum;
                b += w[(j, i)] * ctx.ln_order[(j, i)];
            }
            col_b[i] = b;
        }
    }

    let mut ll = 0.0;
    let mut g = vec![0.0; if grad.is_some() { lay.dim } else { 0 }];
    let mut last_t = usize::MAX;
    let mut z = vec![0.0; n];
    let mut a = vec![0.0; n];
    for &(i, t) in ctx.rows {
        if t != last_t {
            // Neighbourhood sums for this month: Z_i and the decay
            // sensitivity term A_i = sum_j w_{j,i} y_j ln o_{ji}.
            for tgt in 0..n {
                let mut zi = 0.0;
                let mut ai = 0.0;
                for j in 0..n {
                    let wy = w[(j, tgt)] * ctx.cases[j][t - 1];
                    zi += wy;
                    ai += wy * ctx.ln_order[(j, tgt)];
                }
                z[tgt] = zi;
                a[tgt] = ai;
            }
            last_t = t;
        }
        let (sin, cos) = (ctx.sin[t], ctx.cos[t]);
        let nu_lin = component_linear(theta, &lay.endemic, &ctx.features.endemic, sin, cos, i, t)
            .expect("row availability checked");
        let la_lin = component_linear(theta, &lay.epidemic, &ctx.features.epidemic, sin, cos, i, t)
            .expect("row availability checked");
        let ph_lin =
            component_linear(theta, &lay.neighbourhood, &ctx.features.neighbourhood, sin, cos, i, t)
                .expect("row availability checked");
        if nu_lin.abs() > LIN_LIMIT || la_lin.abs() > LIN_LIMIT || ph_lin.abs() > LIN_LIMIT {
            return f64::INFINITY;
        }
        let nu = ctx.exposure[i][t] * nu_lin.exp();
        let ar = la_lin.exp() * ctx.cases[i][t - 1];
        let ne = ph_lin.exp() * z[i];
        let mu = nu + ar + ne;
        if !(mu > 0.0 && mu.is_finite()) {
            return f64::INFINITY;
        }
        let y = ctx.cases[i][t];
        ll += (y + psi).lgamma() - psi.lgamma() - (y + 1.0).lgamma() + psi * psi.ln()
            + y * mu.ln()
            - (y + psi) * (psi + mu).ln();
        if grad.is_some() {
            let dmu = y / mu - (y + psi) / (psi + mu);
            add_component_grad(&mut g, &lay.endemic, &ctx.features.endemic, sin, cos, i, t, dmu * nu);
            add_component_grad(
                &mut g,
                &lay.epidemic,
                &ctx.features.epidemic,
                sin,
                cos,
                i,
                t,
                dmu * ar,
            );
            add_component_grad(
                &mut g,
                &lay.neighbourhood,
                &ctx.features.neighbourhood,
                sin,
                cos,
                i,
                t,
                dmu * ne,
            );
            // dZ/d(log d) = d * (Z_i B_i - A_i).
            g[lay.log_decay] += dmu * ph_lin.exp() * d * (z[i] * col_b[i] - a[i]);
            g[lay.log_dispersion] += psi
                * ((y + psi).digamma() - psi.digamma() + psi.ln() + 1.0
                    - (psi + mu).ln()
                    - (y + psi) / (psi + mu));
        }
    }
    let mut obj = -ll + ctx.penalty.quad(theta);
    if let Some(grad) = grad {
        for (gi, acc) in grad.iter_mut().zip(&g) {
            *gi = -acc;
        }
        ctx.penalty.add_grad(theta, grad);
    }
    if !obj.is_finite() {
        obj = f64::INFINITY;
    }
    obj
}

pub(crate) struct FittedHhh4 {
    pub(crate) params: Hhh4Params,
    theta: Vec<f64>,
    layout: Hhh4Layout,
    approx: GaussianApprox<f64>,
    features: Hhh4Features,
    t_end: usize,
    months: Vec<YearMonth>,
    districts: Vec<String>,
    /// Path-simulation depth, fixed at fit time so forecast streams do not
    /// depend on which horizons a caller requests.
    path_len: usize,
}

/// Extract the fitted parameters of an endemic-epidemic model.
pub fn hhh4_params(model: &FittedModel) -> Result<&Hhh4Params> {
    match &model.inner {
        FittedInner::Hhh4(f) => Ok(&f.params),
        _ => Err(Error::invalid(format!("hhh4_params on a {} model", model.spec.family))),
    }
}

pub(crate) fn fit_hhh4(spec: &ModelSpec, panel: &PanelDataset, t_end: usize) -> Result<FittedModel> {
    let opts = spec.hhh4.as_ref().ok_or_else(|| Error::invalid("missing hhh4 options"))?;
    if t_end < 24 {
        return Err(Error::invalid(format!(
            "hhh4 needs at least 24 training months, got {t_end}"
        )));
    }
    let path_len = spec.max_horizon() as usize;
    let extended = panel.extended(path_len);
    let features = build_features(opts, &extended, t_end)?;
    let n = panel.n_districts();
    let districts = panel.districts().to_vec();
    let layout = build_layout(opts, &features, &districts);
    let penalty = build_penalty(&layout)?;

    let defined = |i: usize, t: usize| -> bool {
        features
            .endemic
            .iter()
            .chain(features.epidemic.iter())
            .chain(features.neighbourhood.iter())
            .all(|f| f.is_defined(i, t))
    };
    let mut rows = Vec::new();
    for t in 1..t_end {
        for i in 0..n {
            if defined(i, t) {
                rows.push((i, t));
            }
        }
    }
    // Rows stay t-major so the per-month neighbourhood sums are reused.
    if rows.is_empty() {
        return Err(Error::invalid("no usable observations after applying covariate lags"));
    }

    let cases: Vec<Vec<f64>> =
        (0..n).map(|i| (0..t_end).map(|t| f64::from(panel.cases(i, t))).collect()).collect();
    let exposure: Vec<Vec<f64>> =
        (0..n).map(|i| (0..t_end).map(|t| panel.population(i, t) / 1e5).collect()).collect();
    let sin: Vec<f64> = (0..t_end).map(|t| phase_angle(panel.month_at(t)).sin()).collect();
    let cos: Vec<f64> = (0..t_end).map(|t| phase_angle(panel.month_at(t)).cos()).collect();
    let graph = panel.adjacency();
    let mut ln_order = DMat::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            if i != j {
                ln_order[(j, i)] = f64::from(graph.order(j, i)).ln();
            }
        }
    }
    let ctx = ObjectiveCtx {
        layout: &layout,
        penalty: &penalty,
        features: &features,
        rows: &rows,
        cases: &cases,
        exposure: &exposure,
        sin: &sin,
        cos: &cos,
        ln_order: &ln_order,
        n,
    };

    let mut x0 = vec![0.0; layout.dim];
    let total_y: f64 = rows.iter().map(|&(i, t)| cases[i][t]).sum();
    let total_e: f64 = rows.iter().map(|&(i, t)| exposure[i][t]).sum();
    x0[layout.endemic.intercept] = ((total_y + 0.5) / total_e * 0.5).ln();
    x0[layout.epidemic.intercept] = 0.3f64.ln();
    x0[layout.neighbourhood.intercept] = 0.1f64.ln();
    x0[layout.log_decay] = 2.0f64.ln();
    x0[layout.log_dispersion] = 10.0f64.ln();

    let mut f = |x: &[f64], g: &mut [f64]| neg_objective(x, Some(g), &ctx);
    let res = lbfgs(&mut f, x0, &LbfgsOptions::default())?;
    if !res.converged {
        return Err(Error::NonConvergence(format!(
            "fit stalled after {} iterations with gradient norm {:.3e}",
            res.iterations, res.grad_norm
        )));
    }
    let mut grad_only = |x: &[f64], g: &mut [f64]| {
        neg_objective(x, Some(g), &ctx);
    };
    let hess = hessian_fd(&mut grad_only, &res.x);
    let approx = GaussianApprox::from_hessian(res.x.clone(), &hess)?;

    let params = unpack(&res.x, &layout, opts, t_end);
    let diagnostics = FitDiagnostics {
        converged: res.converged,
        neg_objective: res.value,
        iterations: res.iterations,
        grad_norm: res.grad_norm,
        outer_evaluations: 0,
        log_marginal: None,
    };
    let months = extended.months().to_vec();
    Ok(FittedModel {
        spec: spec.clone(),
        trained_through: months[t_end - 1],
        diagnostics,
        inner: FittedInner::Hhh4(FittedHhh4 {
            params,
            theta: res.x,
            layout,
            approx,
            features,
            t_end,
            months,
            districts,
            path_len,
        }),
    })
}

impl FittedHhh4 {
    /// Joint path simulation for all districts. One negative-binomial draw at
    /// horizon 1; deeper horizons feed sampled counts back into the
    /// autoregressive and neighbourhood terms. The path always runs to the
    /// fit-time maximum horizon so sample streams are request-independent.
    pub(crate) fn forecast_all(
        &self,
        panel: &PanelDataset,
        horizons: &[u8],
        n_samples: usize,
        seed: u64,
        model_tag: u64,
    ) -> Result<Vec<ForecastDistribution>> {
        if n_samples == 0 {
            return Err(Error::invalid("n_samples must be positive"));
        }
        let origin_t = self.t_end - 1;
        let origin = self.months[origin_t];
        let n = self.districts.len();
        for &h in horizons {
            if h == 0 || h as usize > self.path_len {
                return Err(Error::invalid(format!(
                    "horizon {h} outside the fitted path depth {}",
                    self.path_len
                )));
            }
        }
        let all_features = self
            .features
            .endemic
            .iter()
            .chain(self.features.epidemic.iter())
            .chain(self.features.neighbourhood.iter());
        for step in 1..=self.path_len {
            let t_star = origin_t + step;
            for f in all_features.clone() {
                if f.min_source_lag < step {
                    return Err(Error::invalid(format!(
                        "feature {} has source lag {} < step {step}: it would read observations after the origin",
                        f.name, f.min_source_lag
                    )));
                }
                for i in 0..n {
                    if !f.is_defined(i, t_star) {
                        return Err(Error::missing(format!(
                            "{} undefined at district {}, {}",
                            f.name, self.districts[i], self.months[t_star]
                        )));
                    }
                }
            }
        }

        let ordinal = origin.ordinal() as u64;
        let mut param_rng = stream_rng(seed, &[hash_tag("forecast-params"), model_tag, ordinal]);
        let mut path_rng = stream_rng(seed, &[hash_tag("forecast-obs"), model_tag, ordinal]);

        let y_origin: Vec<f64> = (0..n).map(|i| f64::from(panel.cases(i, origin_t))).collect();
        let exposure: Vec<Vec<f64>> = (1..=self.path_len)
            .map(|step| {
                let ym = self.months[origin_t + step];
                (0..n).map(|i| panel.population_at(i, ym) / 1e5).collect()
            })
            .collect();

        let mut samples: Vec<Vec<Vec<f64>>> =
            vec![vec![Vec::with_capacity(n_samples); horizons.len()]; n];
        for _ in 0..n_samples {
            let draw = self.approx.sample(&mut param_rng);
            let mut p = unpack(&draw, &self.layout, &self.params.opts, self.t_end);
            // Guard extreme Gaussian draws; the caps keep means finite.
            p.decay = draw[self.layout.log_decay].clamp(-8.0, 8.0).exp();
            p.dispersion = draw[self.layout.log_dispersion].clamp(-10.0, 10.0).exp();
            let weights = powerlaw_weights(panel.adjacency(), p.decay)?;

            let mut y_prev = y_origin.clone();
            for step in 1..=self.path_len {
                let t_star = origin_t + step;
                let phase = phase_angle(self.months[t_star]);
                let (sin, cos) = (phase.sin(), phase.cos());
                let mut y_new = vec![0.0; n];
                for i in 0..n {
                    let (nu, ar, ne, _) = decompose(
                        &p,
                        &self.features,
                        &weights,
                        &y_prev,
                        exposure[step - 1][i],
                        sin,
                        cos,
                        i,
                        t_star,
                    )
                    .expect("feature availability checked");
                    let mu = cap(nu) + cap(ar) + cap(ne);
                    let g: f64 = Gamma::new(p.dispersion, 1.0 / p.dispersion)
                        .map_err(|_| Error::numeric("invalid dispersion draw"))?
                        .sample(&mut path_rng);
                    let lam = mu * g;
                    y_new[i] = if lam > 0.0 && lam.is_finite() {
                        Poisson::new(lam.min(SAMPLE_LIN_CAP.exp()))
                            .map_err(|_| Error::numeric("invalid predictive mean"))?
                            .sample(&mut path_rng)
                            .round()
                    } else {
                        0.0
                    };
                }
                if let Some(k) = horizons.iter().position(|&h| h as usize == step) {
                    for i in 0..n {
                        samples[i][k].push(y_new[i]);
                    }
                }
                y_prev = y_new;
            }
        }

        let mut out = Vec::with_capacity(n * horizons.len());
        for (i, district) in self.districts.iter().enumerate() {
            for (k, &h) in horizons.iter().enumerate() {
                out.push(ForecastDistribution {
                    district: district.clone(),
                    origin,
                    horizon: h,
                    samples: std::mem::take(&mut samples[i][k]),
                });
            }
        }
        Ok(out)
    }

    pub(crate) fn parameters_json(&self) -> serde_json::Value {
        let named: serde_json::Map<String, serde_json::Value> = self
            .layout
            .names
            .iter()
            .zip(&self.theta)
            .map(|(n, v)| (n.clone(), json!(v)))
            .collect();
        json!({
            "coefficients": named,
            "decay": self.params.decay,
            "dispersion": self.params.dispersion,
            "districts": self.districts,
        })
    }
}

fn cap(component_mean: f64) -> f64 {
    component_mean.min(SAMPLE_LIN_CAP.exp())
}
