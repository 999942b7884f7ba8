//! Hierarchical spatiotemporal Poisson family. The mean count factors as
//!
//! ```text
//! log mu_{i,t} = log p_i + alpha + log((Y_{i,t-L}+1)/p_i)
//!               + sum_k beta_k X_{k,i,t} + eta_{i,m[t]} + delta_{a[t]} + theta_i
//! ```
//!
//! where the lagged-case term is a unit-coefficient offset (the populations
//! cancel, so it reduces to log(Y_{i,t-L}+1)), eta is a per-district cyclic
//! random walk over calendar months with a shared hyper-variance, delta is a
//! yearly AR(1) shared across districts (optionally per-district), and theta
//! is an iid, Besag, or combined spatial intercept.

use crate::error::{Error, Result};
use crate::models::glm::OuterOptions;
use crate::models::lgm::{fit_lgm, Ar1Kind, LgmConfig, SpatialKind};
use crate::models::reference::assemble;
use crate::models::{
    CovariateSpec, FittedInner, FittedModel, ModelFamily, ModelSpec, SpatialEffect, StOptions,
};
use crate::panel::{
    cumulative_incidence, lag_feature, lagged_offset_term, standardize, FeatureMatrix,
    PanelDataset,
};

/// Assembled feature bundle for one spatiotemporal spec.
pub struct StDesign {
    /// Unit-coefficient terms (the lagged-case offset when enabled).
    pub offset_terms: Vec<FeatureMatrix>,
    /// Free-coefficient columns: standardized lagged weather, then
    /// log-cumulative-incidence windows.
    pub covariates: Vec<FeatureMatrix>,
}

/// Build the covariate bundle. Weather covariates are lagged then
/// standardized per district over `[0, train_end)`; cumulative incidence is
/// shifted so its window ends `case_lag` months before the target.
pub fn build_design(
    opts: &StOptions,
    panel: &PanelDataset,
    max_horizon: u8,
    train_end: usize,
) -> Result<StDesign> {
    let max_h = max_horizon as usize;
    if opts.lagged_case_offset && opts.case_lag < max_h {
        return Err(Error::invalid(format!(
            "case lag {} < max horizon {max_h}: lagged cases would not be observed at forecast time",
            opts.case_lag
        )));
    }
    if train_end == 0 || train_end > panel.n_months() {
        return Err(Error::invalid(format!(
            "training window end {train_end} outside panel of {} months",
            panel.n_months()
        )));
    }

    let mut offset_terms = Vec::new();
    if opts.lagged_case_offset {
        offset_terms.push(lagged_offset_term(panel, opts.case_lag)?);
    }

    let mut covariates = Vec::new();
    for c in &opts.covariates {
        if c.lag < max_h {
            return Err(Error::invalid(format!(
                "covariate {:?} lag {} < max horizon {max_h}",
                c.name, c.lag
            )));
        }
        let raw = FeatureMatrix::from_covariate(&c.name, panel)
            .ok_or_else(|| Error::invalid(format!("covariate {:?} not in the panel", c.name)))?;
        let lagged = lag_feature(&raw, c.lag)?;
        let mut std = standardize(&lagged, 0..train_end)?;
        std.name = format!("{}_lag{}", c.name, c.lag);
        covariates.push(std);
    }
    for &w in &opts.cumulative_windows {
        // cumulative_incidence ends its window at t-1; shift the remaining
        // case_lag - 1 months so no observation after t - case_lag enters.
        let base = cumulative_incidence(panel, w)?;
        let mut shifted = lag_feature(&base, opts.case_lag.saturating_sub(1))?;
        shifted.name = format!("cum_incidence_{w}m");
        covariates.push(shifted);
    }
    Ok(StDesign { offset_terms, covariates })
}

/// Effect values for evaluating the model equation directly; either fitted
/// (via [`st_params`]) or hand-set candidates.
#[derive(Debug, Clone, Default)]
pub struct StParams {
    pub alpha: f64,
    /// Aligned with `StDesign::covariates`.
    pub betas: Vec<f64>,
    /// Per district, 12 values summing to zero; empty when no seasonal term.
    pub month_effects: Vec<Vec<f64>>,
    /// One row when shared across districts, else one per district.
    pub year_effects: Vec<Vec<f64>>,
    /// Spatial intercept per district; empty when absent.
    pub district_effects: Vec<f64>,
}

/// Log predicted mean count at (district, month): the model equation plus
/// `log p` converting the rate to a count.
pub fn log_mean(
    params: &StParams,
    design: &StDesign,
    panel: &PanelDataset,
    i: usize,
    t: usize,
) -> Result<f64> {
    if params.betas.len() != design.covariates.len() {
        return Err(Error::invalid(format!(
            "{} betas for {} covariate columns",
            params.betas.len(),
            design.covariates.len()
        )));
    }
    let missing = |name: &str| {
        Error::missing(format!("{name} undefined at district {i}, month index {t}"))
    };
    let mut eta = params.alpha + panel.population(i, t).ln();
    for f in &design.offset_terms {
        eta += f.get(i, t).ok_or_else(|| missing(&f.name))?;
    }
    for (b, f) in params.betas.iter().zip(&design.covariates) {
        eta += b * f.get(i, t).ok_or_else(|| missing(&f.name))?;
    }
    if !params.month_effects.is_empty() {
        eta += params.month_effects[i][(panel.month_of_year(t) - 1) as usize];
    }
    if !params.year_effects.is_empty() {
        let row = if params.year_effects.len() == 1 { 0 } else { i };
        let y = panel.year_index(t);
        let effects = &params.year_effects[row];
        if y >= effects.len() {
            return Err(Error::missing(format!("no fitted year effect for month index {t}")));
        }
        eta += effects[y];
    }
    if !params.district_effects.is_empty() {
        eta += params.district_effects[i];
    }
    Ok(eta)
}

/// Extract the fitted effect values of a spatiotemporal model.
pub fn st_params(model: &FittedModel) -> Result<StParams> {
    if model.spec.family != ModelFamily::Spatiotemporal {
        return Err(Error::invalid(format!(
            "st_params on a {} model",
            model.spec.family
        )));
    }
    let fit = match &model.inner {
        FittedInner::Lgm(f) => f,
        _ => return Err(Error::invalid("spatiotemporal model with foreign internals")),
    };
    let mode = &fit.hyper.fit.mode;
    Ok(StParams {
        alpha: fit.alpha(),
        betas: fit.layout.fixed.clone().map(|c| mode[c]).collect(),
        month_effects: fit.expanded_month_effects().unwrap_or_default(),
        year_effects: fit.year_effects().unwrap_or_default(),
        district_effects: fit.district_effects().unwrap_or_default(),
    })
}

pub(crate) fn fit_st(spec: &ModelSpec, panel: &PanelDataset, t_end: usize) -> Result<FittedModel> {
    let opts = spec.st.as_ref().ok_or_else(|| Error::invalid("missing spatiotemporal options"))?;
    let extended = panel.extended(spec.max_horizon() as usize);
    let design = build_design(opts, &extended, spec.max_horizon(), t_end)?;
    let cfg = LgmConfig {
        fixed: design.covariates,
        offsets: design.offset_terms,
        month_rw: opts.seasonal,
        harmonics: false,
        spatial: match opts.spatial {
            SpatialEffect::Iid => SpatialKind::Iid,
            SpatialEffect::Besag => SpatialKind::Besag,
            SpatialEffect::Bym2 => SpatialKind::Bym2,
        },
        ar1: if opts.per_district_ar1 { Ar1Kind::PerDistrict } else { Ar1Kind::Shared },
        units: (0..panel.n_districts()).collect(),
    };
    let fit = fit_lgm(&extended, t_end, cfg, &OuterOptions::default())?;
    Ok(assemble(spec.clone(), fit))
}

/// The configuration sweep over covariate sets and random-effect structures:
/// 5 covariate sets x 3 spatial structures x shared/per-district AR(1) x
/// seasonality on/off = 60 specs.
pub fn sweep_specs() -> Vec<ModelSpec> {
    let covariate_sets: [(&str, Vec<CovariateSpec>, Vec<usize>); 5] = [
        ("c0", vec![], vec![]),
        ("tmin", vec![CovariateSpec::new("tmin", 3)], vec![]),
        ("precip", vec![CovariateSpec::new("precip", 3)], vec![]),
        (
            "weather",
            vec![CovariateSpec::new("tmin", 3), CovariateSpec::new("precip", 3)],
            vec![],
        ),
        (
            "weather-cum",
            vec![CovariateSpec::new("tmin", 3), CovariateSpec::new("precip", 3)],
            vec![12, 24, 36],
        ),
    ];
    let spatials =
        [("iid", SpatialEffect::Iid), ("besag", SpatialEffect::Besag), ("bym2", SpatialEffect::Bym2)];
    let mut out = Vec::with_capacity(60);
    for (cov_name, covs, windows) in &covariate_sets {
        for (sp_name, sp) in &spatials {
            for per_district in [false, true] {
                for seasonal in [true, false] {
                    let ar_name = if per_district { "ard" } else { "ars" };
                    let seas_name = if seasonal { "seas" } else { "flat" };
                    out.push(ModelSpec {
                        name: format!("sweep-{cov_name}-{sp_name}-{ar_name}-{seas_name}"),
                        family: ModelFamily::Spatiotemporal,
                        horizons: vec![1, 2, 3],
                        st: Some(StOptions {
                            covariates: covs.clone(),
                            cumulative_windows: windows.clone(),
                            spatial: *sp,
                            per_district_ar1: per_district,
                            seasonal,
                            ..StOptions::default()
                        }),
                        hhh4: None,
                        pca: None,
                    });
                }
            }
        }
    }
    out
}
