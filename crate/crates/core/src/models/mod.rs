//! Forecasting-model stack: a common spec/fit/forecast contract over four
//! families (seasonal reference, hierarchical spatiotemporal Poisson,
//! endemic-epidemic negative binomial, Y-aware principal-component
//! regression).
//!
//! A [`ModelSpec`] names a family and its structure; [`fit`] trains it on a
//! prefix of the panel; the returned [`FittedModel`] serves predictive count
//! samples per district and horizon. All randomness flows from caller seeds
//! through per-(model, origin, district, horizon) counter streams, so any
//! slice of a forecast batch is reproducible in isolation.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calendar::YearMonth;
use crate::error::{Error, Result};
use crate::num::hash_tag;
use crate::panel::PanelDataset;

pub(crate) mod design;
pub(crate) mod effects;
pub(crate) mod glm;
pub(crate) mod lgm;

pub mod hhh4;
pub mod pca;
pub mod reference;
pub mod spatiotemporal;

/// Forecast distributions admitted to scoring must carry at least this many
/// samples.
pub const MIN_SCORING_SAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    Reference,
    Spatiotemporal,
    Hhh4,
    Pca,
}

impl std::fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelFamily::Reference => "reference",
            ModelFamily::Spatiotemporal => "spatiotemporal",
            ModelFamily::Hhh4 => "hhh4",
            ModelFamily::Pca => "pca",
        };
        f.write_str(s)
    }
}

/// A panel covariate consumed at a fixed lag (months).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    pub lag: usize,
}

impl CovariateSpec {
    pub fn new(name: impl Into<String>, lag: usize) -> Self {
        CovariateSpec { name: name.into(), lag }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialEffect {
    Iid,
    Besag,
    Bym2,
}

/// Structure of the hierarchical spatiotemporal Poisson family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StOptions {
    /// Include log((Y_{i,t-L}+1)/p_i) as a unit-coefficient offset term.
    pub lagged_case_offset: bool,
    /// L above; also the end-shift for cumulative-incidence windows.
    pub case_lag: usize,
    pub covariates: Vec<CovariateSpec>,
    /// Log cumulative incidence over these trailing windows (months).
    pub cumulative_windows: Vec<usize>,
    pub spatial: SpatialEffect,
    /// Yearly AR(1) effects: shared across districts by default.
    pub per_district_ar1: bool,
    /// Per-district cyclic random walk over calendar months.
    pub seasonal: bool,
}

impl Default for StOptions {
    fn default() -> Self {
        StOptions {
            lagged_case_offset: true,
            case_lag: 3,
            covariates: Vec::new(),
            cumulative_windows: Vec::new(),
            spatial: SpatialEffect::Iid,
            per_district_ar1: false,
            seasonal: true,
        }
    }
}

/// Structure of the endemic-epidemic negative-binomial family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hhh4Options {
    pub endemic_covariates: Vec<CovariateSpec>,
    pub epidemic_covariates: Vec<CovariateSpec>,
    pub neighbourhood_covariates: Vec<CovariateSpec>,
    /// Log cumulative incidence (window below) in the endemic/epidemic
    /// predictors.
    pub endemic_cumulative: bool,
    pub epidemic_cumulative: bool,
    pub cumulative_window: usize,
    /// Trailing shift so the cumulative window ends this many months back.
    pub cumulative_lag: usize,
    pub endemic_district_effects: bool,
    pub epidemic_district_effects: bool,
    pub neighbourhood_district_effects: bool,
}

impl Default for Hhh4Options {
    fn default() -> Self {
        Hhh4Options {
            endemic_covariates: Vec::new(),
            epidemic_covariates: Vec::new(),
            neighbourhood_covariates: Vec::new(),
            endemic_cumulative: false,
            epidemic_cumulative: false,
            cumulative_window: 12,
            cumulative_lag: 3,
            endemic_district_effects: true,
            epidemic_district_effects: true,
            neighbourhood_district_effects: true,
        }
    }
}

/// Structure of the Y-aware principal-component regression family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaOptions {
    pub n_components: usize,
    /// Lags of every district's standardized log-incidence fed to the PCA.
    pub case_lags: Vec<usize>,
    pub covariates: Vec<CovariateSpec>,
}

impl Default for PcaOptions {
    fn default() -> Self {
        PcaOptions { n_components: 10, case_lags: vec![3, 4, 5], covariates: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub family: ModelFamily,
    /// Forecast horizons in months, subset of {1, 2, 3}.
    pub horizons: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub st: Option<StOptions>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hhh4: Option<Hhh4Options>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pca: Option<PcaOptions>,
}

impl ModelSpec {
    pub fn preset_names() -> &'static [&'static str] {
        &["reference", "st1", "st2", "st3", "hhh4", "pca"]
    }

    /// The named model configurations shipped with the pipeline: the seasonal
    /// reference plus the five ensemble components.
    pub fn preset(name: &str) -> Result<ModelSpec> {
        let horizons = vec![1, 2, 3];
        let spec = match name {
            "reference" => ModelSpec {
                name: name.into(),
                family: ModelFamily::Reference,
                horizons,
                st: None,
                hhh4: None,
                pca: None,
            },
            "st1" => ModelSpec {
                name: name.into(),
                family: ModelFamily::Spatiotemporal,
                horizons,
                st: Some(StOptions::default()),
                hhh4: None,
                pca: None,
            },
            "st2" => ModelSpec {
                name: name.into(),
                family: ModelFamily::Spatiotemporal,
                horizons,
                st: Some(StOptions {
                    covariates: vec![
                        CovariateSpec::new("tmin", 3),
                        CovariateSpec::new("precip", 3),
                    ],
                    spatial: SpatialEffect::Besag,
                    ..StOptions::default()
                }),
                hhh4: None,
                pca: None,
            },
            "st3" => ModelSpec {
                name: name.into(),
                family: ModelFamily::Spatiotemporal,
                horizons,
                st: Some(StOptions {
                    covariates: vec![
                        CovariateSpec::new("tmin", 3),
                        CovariateSpec::new("precip", 3),
                    ],
                    cumulative_windows: vec![12, 24, 36],
                    spatial: SpatialEffect::Besag,
                    ..StOptions::default()
                }),
                hhh4: None,
                pca: None,
            },
            "hhh4" => {
                let covars = vec![CovariateSpec::new("tavg", 3), CovariateSpec::new("precip", 3)];
                ModelSpec {
                    name: name.into(),
                    family: ModelFamily::Hhh4,
                    horizons,
                    st: None,
                    hhh4: Some(Hhh4Options {
                        endemic_covariates: covars.clone(),
                        epidemic_covariates: covars,
                        endemic_cumulative: true,
                        epidemic_cumulative: true,
                        ..Hhh4Options::default()
                    }),
                    pca: None,
                }
            }
            "pca" => ModelSpec {
                name: name.into(),
                family: ModelFamily::Pca,
                horizons,
                st: None,
                hhh4: None,
                pca: Some(PcaOptions {
                    covariates: vec![
                        CovariateSpec::new("tavg", 3),
                        CovariateSpec::new("precip", 3),
                    ],
                    ..PcaOptions::default()
                }),
            },
            other => {
                return Err(Error::invalid(format!(
                    "unknown model preset {other:?}; available: {:?}",
                    Self::preset_names()
                )))
            }
        };
        Ok(spec)
    }

    pub fn max_horizon(&self) -> u8 {
        self.horizons.iter().copied().max().unwrap_or(0)
    }

    /// Stable tag deriving this model's RNG streams.
    pub fn rng_tag(&self) -> u64 {
        hash_tag(&self.name)
    }

    /// Structural checks plus panel compatibility: the lag rule (every case
    /// or weather input must be lagged at least as far as the furthest
    /// horizon) and covariate existence.
    pub fn validate(&self, panel: &PanelDataset) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::invalid("model name must be non-empty"));
        }
        if self.horizons.is_empty() {
            return Err(Error::invalid("horizon set must be non-empty"));
        }
        let mut seen = [false; 4];
        for &h in &self.horizons {
            if !(1..=3).contains(&h) {
                return Err(Error::invalid(format!("horizon {h} outside {{1,2,3}}")));
            }
            if seen[h as usize] {
                return Err(Error::invalid(format!("duplicate horizon {h}")));
            }
            seen[h as usize] = true;
        }
        let max_h = self.max_horizon() as usize;
        let check_covariates = |covs: &[CovariateSpec], what: &str| -> Result<()> {
            for c in covs {
                if panel.covariate(&c.name).is_none() {
                    return Err(Error::invalid(format!(
                        "{what} covariate {:?} not present in the panel",
                        c.name
                    )));
                }
                if c.lag < max_h {
                    return Err(Error::invalid(format!(
                        "{what} covariate {:?} lag {} < max horizon {max_h}",
                        c.name, c.lag
                    )));
                }
            }
            Ok(())
        };
        let expect_options = |ok: bool, family: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::invalid(format!("{family} spec requires its options block")))
            }
        };
        match self.family {
            ModelFamily::Reference => {
                if self.st.is_some() || self.hhh4.is_some() || self.pca.is_some() {
                    return Err(Error::invalid("reference model takes no options"));
                }
            }
            ModelFamily::Spatiotemporal => {
                expect_options(self.st.is_some(), "spatiotemporal")?;
                let st = self.st.as_ref().expect("present");
                if st.lagged_case_offset && st.case_lag < max_h {
                    return Err(Error::invalid(format!(
                        "case lag {} < max horizon {max_h}",
                        st.case_lag
                    )));
                }
                check_covariates(&st.covariates, "spatiotemporal")?;
                for &w in &st.cumulative_windows {
                    if w == 0 {
                        return Err(Error::invalid("cumulative window must be positive"));
                    }
                }
            }
            ModelFamily::Hhh4 => {
                expect_options(self.hhh4.is_some(), "hhh4")?;
                let o = self.hhh4.as_ref().expect("present");
                check_covariates(&o.endemic_covariates, "endemic")?;
                check_covariates(&o.epidemic_covariates, "epidemic")?;
                check_covariates(&o.neighbourhood_covariates, "neighbourhood")?;
                if (o.endemic_cumulative || o.epidemic_cumulative) && o.cumulative_window == 0 {
                    return Err(Error::invalid("cumulative window must be positive"));
                }
                if (o.endemic_cumulative || o.epidemic_cumulative) && o.cumulative_lag < max_h {
                    return Err(Error::invalid(format!(
                        "cumulative incidence lag {} < max horizon {max_h}",
                        o.cumulative_lag
                    )));
                }
            }
            ModelFamily::Pca => {
                expect_options(self.pca.is_some(), "pca")?;
                let o = self.pca.as_ref().expect("present");
                if o.n_components == 0 {
                    return Err(Error::invalid("n_components must be positive"));
                }
                if o.case_lags.is_empty() {
                    return Err(Error::invalid("pca needs at least one case lag"));
                }
                for &l in &o.case_lags {
                    if l < max_h {
                        return Err(Error::invalid(format!(
                            "case lag {l} < max horizon {max_h}"
                        )));
                    }
                }
                check_covariates(&o.covariates, "pca")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub converged: bool,
    /// Final penalized negative log-likelihood at the mode.
    pub neg_objective: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Hyperparameter-search objective evaluations (0 when no hypers).
    pub outer_evaluations: usize,
    /// Laplace log-marginal at the selected hyperparameters.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_marginal: Option<f64>,
}

pub(crate) enum FittedInner {
    Lgm(lgm::LgmFit),
    Hhh4(hhh4::FittedHhh4),
    Pca(pca::FittedPca),
}

/// A trained model, immutable after fit; forecast calls may run concurrently.
pub struct FittedModel {
    pub spec: ModelSpec,
    /// Last month inside the training window; also the forecast origin.
    pub trained_through: YearMonth,
    pub diagnostics: FitDiagnostics,
    pub(crate) inner: FittedInner,
}

/// Train `spec` on panel months `[0, t_end)`.
pub fn fit(spec: &ModelSpec, panel: &PanelDataset, t_end: usize) -> Result<FittedModel> {
    spec.validate(panel)?;
    if t_end == 0 {
        return Err(Error::invalid("empty training window"));
    }
    if t_end > panel.n_months() {
        return Err(Error::invalid(format!(
            "training window end {t_end} exceeds panel length {}",
            panel.n_months()
        )));
    }
    match spec.family {
        ModelFamily::Reference => reference::fit_reference(spec, panel, t_end),
        ModelFamily::Spatiotemporal => spatiotemporal::fit_st(spec, panel, t_end),
        ModelFamily::Hhh4 => hhh4::fit_hhh4(spec, panel, t_end),
        ModelFamily::Pca => pca::fit_pcr_all(spec, panel, t_end),
    }
}

impl FittedModel {
    /// Predictive samples for every district at every spec horizon.
    pub fn forecast_all(
        &self,
        panel: &PanelDataset,
        n_samples: usize,
        seed: u64,
    ) -> Result<Vec<ForecastDistribution>> {
        let tag = self.spec.rng_tag();
        match &self.inner {
            FittedInner::Lgm(f) => {
                f.forecast_all(panel, &self.spec.horizons, n_samples, seed, tag)
            }
            FittedInner::Hhh4(f) => {
                f.forecast_all(panel, &self.spec.horizons, n_samples, seed, tag)
            }
            FittedInner::Pca(f) => f.forecast_all(panel, &self.spec.horizons, n_samples, seed, tag),
        }
    }

    /// Single-cell forecast. `origin` must be the month the model was trained
    /// through (forecasting from any other origin requires a refit). Returns
    /// exactly the samples the corresponding [`Self::forecast_all`] entry
    /// would carry.
    pub fn forecast(
        &self,
        panel: &PanelDataset,
        district: &str,
        origin: YearMonth,
        horizon: u8,
        n_samples: usize,
        seed: u64,
    ) -> Result<ForecastDistribution> {
        if origin != self.trained_through {
            return Err(Error::invalid(format!(
                "model {:?} was trained through {}; forecasting from {origin} requires a refit",
                self.spec.name, self.trained_through
            )));
        }
        if !self.spec.horizons.contains(&horizon) {
            return Err(Error::invalid(format!(
                "horizon {horizon} not in the spec horizon set {:?}",
                self.spec.horizons
            )));
        }
        if panel.district_index(district).is_none() {
            return Err(Error::invalid(format!("unknown district {district:?}")));
        }
        let tag = self.spec.rng_tag();
        let batch = match &self.inner {
            FittedInner::Lgm(f) => f.forecast_all(panel, &[horizon], n_samples, seed, tag)?,
            FittedInner::Hhh4(f) => f.forecast_all(panel, &[horizon], n_samples, seed, tag)?,
            FittedInner::Pca(f) => f.forecast_all(panel, &[horizon], n_samples, seed, tag)?,
        };
        batch
            .into_iter()
            .find(|d| d.district == district)
            .ok_or_else(|| Error::invalid(format!("district {district:?} not in this fit")))
    }

    /// Versioned JSON document: spec, diagnostics, and family parameters.
    pub fn to_json(&self) -> serde_json::Value {
        let parameters = match &self.inner {
            FittedInner::Lgm(f) => f.parameters_json(),
            FittedInner::Hhh4(f) => f.parameters_json(),
            FittedInner::Pca(f) => f.parameters_json(),
        };
        serde_json::json!({
            "format_version": 1,
            "spec": self.spec,
            "trained_through": self.trained_through.to_string(),
            "diagnostics": self.diagnostics,
            "parameters": parameters,
        })
    }
}

/// Predictive count samples for one (district, origin, horizon) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastDistribution {
    pub district: String,
    pub origin: YearMonth,
    pub horizon: u8,
    /// Non-negative integer counts, stored as f64 for the scoring kernels.
    pub samples: Vec<f64>,
}

impl ForecastDistribution {
    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }

    pub fn mean(&self) -> f64 {
        if self.samples.is_empty() {
            return f64::NAN;
        }
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }

    /// Scoring admission: enough samples, all finite non-negative counts.
    pub fn check_scorable(&self) -> Result<()> {
        if self.samples.len() < MIN_SCORING_SAMPLES {
            return Err(Error::invalid(format!(
                "{} samples at {}/{} h{}: scoring requires at least {MIN_SCORING_SAMPLES}",
                self.samples.len(),
                self.district,
                self.origin,
                self.horizon
            )));
        }
        if self.samples.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(format!(
                "non-finite or negative sample at {}/{} h{}",
                self.district, self.origin, self.horizon
            )));
        }
        Ok(())
    }

    /// Target month this forecast refers to.
    pub fn target(&self) -> YearMonth {
        self.origin.add_months(i64::from(self.horizon))
    }
}

/// Skill of a model against a reference on mean CRPS: 1 - model/reference.
/// Positive means better than reference; 1 is a perfect model.
pub fn crpss(model_crps: f64, reference_crps: f64) -> Result<f64> {
    if !(reference_crps.is_finite() && model_crps.is_finite()) {
        return Err(Error::invalid("CRPS inputs must be finite"));
    }
    if reference_crps <= 0.0 {
        return Err(Error::invalid(
            "reference CRPS must be positive: skill is undefined against a perfect reference",
        ));
    }
    Ok(1.0 - model_crps / reference_crps)
}

/// Write forecast samples as `district,origin_year,origin_month,horizon,sample_index,value`.
pub fn write_forecast_csv(dists: &[ForecastDistribution], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::data(format!("create {}: {e}", path.display())))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e: std::io::Error| Error::data(format!("write {}: {e}", path.display()));
    writeln!(w, "district,origin_year,origin_month,horizon,sample_index,value").map_err(io)?;
    for d in dists {
        for (k, v) in d.samples.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                d.district, d.origin.year, d.origin.month, d.horizon, k, v
            )
            .map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Read forecasts written by [`write_forecast_csv`]. Rows must be grouped by
/// (district, origin, horizon) with sample indices 0..n in order.
pub fn read_forecast_csv(path: &Path) -> Result<Vec<ForecastDistribution>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::data(format!("open {}: {e}", path.display())))?;
    let expect = ["district", "origin_year", "origin_month", "horizon", "sample_index", "value"];
    let headers = reader.headers().map_err(|e| Error::data(e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != expect {
        return Err(Error::data(format!(
            "{}: unexpected forecast header {:?}",
            path.display(),
            headers
        )));
    }
    let mut out: Vec<ForecastDistribution> = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let ctx = || format!("{} row {}", path.display(), line + 2);
        let field = |k: usize| -> Result<&str> {
            rec.get(k).ok_or_else(|| Error::data(format!("{}: short row", ctx())))
        };
        let district = field(0)?.to_string();
        let year: i32 = field(1)?.parse().map_err(|_| Error::data(format!("{}: bad year", ctx())))?;
        let month: u8 =
            field(2)?.parse().map_err(|_| Error::data(format!("{}: bad month", ctx())))?;
        let horizon: u8 =
            field(3)?.parse().map_err(|_| Error::data(format!("{}: bad horizon", ctx())))?;
        let idx: usize =
            field(4)?.parse().map_err(|_| Error::data(format!("{}: bad index", ctx())))?;
        let value: f64 =
            field(5)?.parse().map_err(|_| Error::data(format!("{}: bad value", ctx())))?;
        let origin = YearMonth::new(year, month)
            .map_err(|e| Error::data(format!("{}: {e}", ctx())))?;
        let matches_last = out
            .last()
            .map(|d| d.district == district && d.origin == origin && d.horizon == horizon)
            .unwrap_or(false);
        if matches_last {
            let d = out.last_mut().expect("non-empty");
            if idx != d.samples.len() {
                return Err(Error::data(format!("{}: sample index out of order", ctx())));
            }
            d.samples.push(value);
        } else {
            if idx != 0 {
                return Err(Error::data(format!("{}: sample index must restart at 0", ctx())));
            }
            out.push(ForecastDistribution { district, origin, horizon, samples: vec![value] });
        }
    }
    Ok(out)
}
