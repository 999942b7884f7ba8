//! Synthetic surveillance panels.
//!
//! Two kinds of generator live here. [`generate_panel`] builds an
//! observational benchmark: harmonic seasonal baselines per district, planted
//! outbreak windows, an optional persistent hotspot, weather covariates, and
//! negative-binomial counts on a grid adjacency. The `simulate_*_panel`
//! functions instead draw data from a model family's own equation at known
//! parameter values, so a fit on the result has a ground truth to recover.
//! Covariates that a family standardizes before fitting are standardized the
//! same way here before they enter the generating equation; planted
//! coefficients are therefore on exactly the scale the fit reports.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};

use crate::calendar::YearMonth;
use crate::error::{Error, Result};
use crate::models::hhh4::powerlaw_weights;
use crate::models::pca::{
    component_features, fit_pca, incidence_bundle, seasonal_residual_scores, y_aware_rescale,
};
use crate::models::{CovariateSpec, Hhh4Options, ModelSpec};
use crate::num::{hash_tag, stream_rng};
use crate::panel::{lag_feature, standardize, AdjacencyGraph, Covariate, FeatureMatrix};
use crate::panel::{PanelDataset, PanelParts};

fn district_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("d{i:02}")).collect()
}

/// Rook-adjacency edges of districts laid out row-major on a near-square
/// grid. Connected for any positive count.
pub fn grid_edges(n: usize) -> Vec<(String, String)> {
    let names = district_names(n);
    let cols = (n as f64).sqrt().ceil() as usize;
    let mut edges = Vec::new();
    for k in 0..n {
        if (k + 1) % cols != 0 && k + 1 < n {
            edges.push((names[k].clone(), names[k + 1].clone()));
        }
        if k + cols < n {
            edges.push((names[k].clone(), names[k + cols].clone()));
        }
    }
    edges
}

fn poisson_count(rng: &mut impl Rng, mu: f64) -> i64 {
    let mu = mu.clamp(1e-12, 5e8);
    Poisson::new(mu).expect("positive finite mean").sample(rng) as i64
}

/// Negative binomial with mean `mu` and dispersion `psi` (Var = mu + mu^2/psi)
/// via its gamma-Poisson mixture.
fn negbin_count(rng: &mut impl Rng, mu: f64, psi: f64) -> i64 {
    let g: f64 = Gamma::new(psi, 1.0 / psi).expect("positive dispersion").sample(rng);
    poisson_count(rng, mu * g)
}

fn ar1_series(rng: &mut impl Rng, len: usize, rho: f64, sd: f64) -> Vec<f64> {
    let innov = Normal::new(0.0, sd).expect("positive sd");
    let stationary_sd = sd / (1.0 - rho * rho).sqrt();
    let mut x = Normal::new(0.0, stationary_sd).expect("positive sd").sample(rng);
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(x);
        x = rho * x + innov.sample(rng);
    }
    out
}

fn phase(m: YearMonth) -> f64 {
    2.0 * std::f64::consts::PI * (m.phase().rem_euclid(12)) as f64 / 12.0
}

/// Lag-3-and-standardize a raw covariate matrix exactly as the model families
/// do, so a generator can plant coefficients on the fitted scale. Undefined
/// cells (the first `lag` months) read as zero.
fn fitted_scale(
    raw: &FeatureMatrix,
    lag: usize,
    t_end: usize,
) -> Result<impl Fn(usize, usize) -> f64> {
    let z = standardize(&lag_feature(raw, lag)?, 0..t_end)?;
    Ok(move |i: usize, t: usize| z.get(i, t).unwrap_or(0.0))
}

// ---------------------------------------------------------------------------
// Benchmark panel

/// Shape of the observational benchmark generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_districts: usize,
    pub n_months: usize,
    pub start: YearMonth,
    /// Log incidence per 100k at the seasonal midpoint.
    pub base_log_incidence: f64,
    pub seasonal_amplitude: f64,
    /// Innovation sd of the shared year-level AR(1) (rho 0.6).
    pub year_sd: f64,
    /// Probability a district-year carries an outbreak window.
    pub outbreak_rate: f64,
    /// Log-scale excess during an outbreak window.
    pub outbreak_boost: f64,
    /// District with a persistent incidence excess.
    pub hotspot: Option<usize>,
    pub hotspot_boost: f64,
    /// Negative-binomial dispersion of the counts.
    pub dispersion: f64,
    /// Couple incidence to 3-month-lagged temperature and rainfall.
    pub weather_coupling: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_districts: 20,
            n_months: 228,
            start: YearMonth::new(2004, 1).expect("valid month"),
            base_log_incidence: 2.6,
            seasonal_amplitude: 0.8,
            year_sd: 0.25,
            outbreak_rate: 0.15,
            outbreak_boost: 0.9,
            hotspot: Some(0),
            hotspot_boost: 0.7,
            dispersion: 9.0,
            weather_coupling: true,
        }
    }
}

/// An outbreak window the generator injected, for detector benchmarking.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedOutbreak {
    pub district: usize,
    pub start: YearMonth,
    pub duration: u8,
}

/// Build the benchmark panel. Deterministic in (config, seed); every RNG
/// concern (weather, effects, outbreak placement, counts) draws from its own
/// stream so adding one does not reshuffle the others.
pub fn generate_panel(
    cfg: &SynthConfig,
    seed: u64,
) -> Result<(PanelDataset, Vec<PlantedOutbreak>)> {
    let n = cfg.n_districts;
    let t_len = cfg.n_months;
    if n == 0 || t_len < 24 {
        return Err(Error::invalid("benchmark panel needs districts and at least 24 months"));
    }
    if let Some(h) = cfg.hotspot {
        if h >= n {
            return Err(Error::invalid(format!("hotspot index {h} out of {n} districts")));
        }
    }
    let names = district_names(n);
    let months: Vec<YearMonth> = (0..t_len).map(|k| cfg.start.add_months(k as i64)).collect();
    let n_years = {
        let mut years: Vec<i32> = months.iter().map(|m| m.year).collect();
        years.dedup();
        years.len()
    };

    // Populations: lognormal spread around 120k, 1.2% yearly growth.
    let mut rng = stream_rng(seed, &[hash_tag("synth-panel"), 0]);
    let mut population = vec![0.0; n * t_len];
    for i in 0..n {
        let base = 120_000.0 * (0.8 * (rng.gen::<f64>() - 0.5)).exp();
        for (t, m) in months.iter().enumerate() {
            let year_idx = (m.year - cfg.start.year) as f64;
            population[i * t_len + t] = (base * 1.012_f64.powf(year_idx)).round();
        }
    }

    // Weather: shared annual cycles with district offsets and iid noise.
    let mut rng = stream_rng(seed, &[hash_tag("synth-panel"), 1]);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut tavg = vec![0.0; n * t_len];
    let mut tmin = vec![0.0; n * t_len];
    let mut precip = vec![0.0; n * t_len];
    for i in 0..n {
        let site = noise.sample(&mut rng);
        for (t, m) in months.iter().enumerate() {
            let ph = phase(*m);
            let a = 27.0 + 0.6 * site
                + 4.0 * (ph - 2.0 * std::f64::consts::PI * 4.0 / 12.0).sin()
                + 0.7 * noise.sample(&mut rng);
            tavg[i * t_len + t] = a;
            tmin[i * t_len + t] = a - 5.5 + 0.4 * noise.sample(&mut rng);
            precip[i * t_len + t] = (170.0
                + 150.0 * (ph - 2.0 * std::f64::consts::PI * 6.0 / 12.0).sin()
                + 45.0 * noise.sample(&mut rng))
            .max(0.0);
        }
    }

    // Latent structure: district seasonality, hotspot, shared year effects.
    let mut rng = stream_rng(seed, &[hash_tag("synth-panel"), 2]);
    let amp: Vec<f64> =
        (0..n).map(|_| cfg.seasonal_amplitude * (1.0 + 0.15 * noise.sample(&mut rng))).collect();
    let peak: Vec<i64> = (0..n)
        .map(|_| 6 + (0.8 * noise.sample(&mut rng)).round().clamp(-2.0, 2.0) as i64)
        .collect();
    let year_eff = ar1_series(&mut rng, n_years, 0.6, cfg.year_sd);

    // Outbreak windows near each district's seasonal peak.
    let mut rng = stream_rng(seed, &[hash_tag("synth-panel"), 3]);
    let mut outbreaks = Vec::new();
    let mut boost = vec![0.0; n * t_len];
    for i in 0..n {
        for year in 0..n_years {
            if rng.gen::<f64>() >= cfg.outbreak_rate {
                continue;
            }
            let month_in_year = (peak[i] + rng.gen_range(-1..=1)).clamp(0, 11);
            let t0 = year as i64 * 12 + month_in_year - (cfg.start.month as i64 - 1);
            let duration = 2 + rng.gen_range(0..=1) as u8;
            if t0 < 0 || t0 as usize + duration as usize > t_len {
                continue;
            }
            for dt in 0..duration as usize {
                boost[i * t_len + t0 as usize + dt] = cfg.outbreak_boost;
            }
            outbreaks.push(PlantedOutbreak {
                district: i,
                start: months[t0 as usize],
                duration,
            });
        }
    }

    // Counts.
    let mut rng = stream_rng(seed, &[hash_tag("synth-panel"), 4]);
    let mut cases = vec![0i64; n * t_len];
    for i in 0..n {
        for t in 0..t_len {
            let m = months[t];
            let mut eta = cfg.base_log_incidence
                + amp[i] * (phase(m) - 2.0 * std::f64::consts::PI * peak[i] as f64 / 12.0).sin()
                + year_eff[(m.year - cfg.start.year) as usize]
                + boost[i * t_len + t];
            if cfg.hotspot == Some(i) {
                eta += cfg.hotspot_boost;
            }
            if cfg.weather_coupling && t >= 3 {
                eta += 0.05 * (tavg[i * t_len + t - 3] - 27.0)
                    + 0.0012 * (precip[i * t_len + t - 3] - 170.0);
            }
            let mu = population[i * t_len + t] / 1e5 * eta.exp();
            cases[i * t_len + t] = negbin_count(&mut rng, mu, cfg.dispersion);
        }
    }

    let mut covariates = BTreeMap::new();
    for (name, unit, values) in [
        ("tavg", "degC", tavg),
        ("tmin", "degC", tmin),
        ("precip", "mm", precip),
    ] {
        covariates.insert(name.to_string(), Covariate { unit: unit.to_string(), values });
    }
    let parts = PanelParts {
        districts: names,
        months,
        cases,
        population,
        covariates,
        edges: grid_edges(n),
    };
    Ok((parts.build()?, outbreaks))
}

// ---------------------------------------------------------------------------
// Spatiotemporal recovery

/// Ground truth for [`simulate_st_panel`]. Weather coefficients are on the
/// lag-3, training-standardized scale the fit reports.
#[derive(Debug, Clone, PartialEq)]
pub struct StRecovery {
    pub alpha: f64,
    pub beta_tmin: f64,
    pub beta_precip: f64,
    /// Amplitude of each district's calendar-month effect.
    pub month_amp: f64,
    pub year_rho: f64,
    pub year_sd: f64,
    pub spatial_sd: f64,
}

impl Default for StRecovery {
    fn default() -> Self {
        StRecovery {
            alpha: 0.02,
            beta_tmin: 0.4,
            beta_precip: -0.3,
            month_amp: 0.3,
            year_rho: 0.5,
            year_sd: 0.2,
            spatial_sd: 0.25,
        }
    }
}

/// Draw a panel from the spatiotemporal equation with the lag-3 case offset:
/// log(mu/p) = alpha + log((Y_{t-3}+1)/p) + beta.z + month + year + spatial.
/// Fit the `st2` preset on the result; its betas estimate the planted pair.
pub fn simulate_st_panel(
    n: usize,
    t_len: usize,
    t_end: usize,
    truth: &StRecovery,
    seed: u64,
) -> Result<PanelDataset> {
    if n < 2 || t_len < 48 || t_end > t_len || t_end < 48 {
        return Err(Error::invalid("st recovery needs >= 2 districts and >= 48 training months"));
    }
    let names = district_names(n);
    let start = YearMonth::new(2008, 1).expect("valid month");
    let months: Vec<YearMonth> = (0..t_len).map(|k| start.add_months(k as i64)).collect();
    let population = vec![100_000.0; n * t_len];

    // Exogenous weather: per-district AR(1), no seasonal part, so the betas
    // stay identified next to the free calendar-month effects.
    let mut rng = stream_rng(seed, &[hash_tag("synth-st"), 0]);
    let mut raw_tmin = FeatureMatrix::new("tmin", n, t_len, 0);
    let mut raw_precip = FeatureMatrix::new("precip", n, t_len, 0);
    for i in 0..n {
        for (t, v) in ar1_series(&mut rng, t_len, 0.4, 0.9).into_iter().enumerate() {
            raw_tmin.set(i, t, 24.0 + 2.0 * v);
        }
        for (t, v) in ar1_series(&mut rng, t_len, 0.4, 0.9).into_iter().enumerate() {
            raw_precip.set(i, t, 160.0 + 60.0 * v);
        }
    }
    let z_tmin = fitted_scale(&raw_tmin, 3, t_end)?;
    let z_precip = fitted_scale(&raw_precip, 3, t_end)?;

    let mut rng = stream_rng(seed, &[hash_tag("synth-st"), 1]);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let peaks: Vec<i64> = (0..n).map(|_| rng.gen_range(4..9)).collect();
    let mut theta: Vec<f64> = (0..n).map(|_| truth.spatial_sd * noise.sample(&mut rng)).collect();
    let mean_theta = theta.iter().sum::<f64>() / n as f64;
    for v in &mut theta {
        *v -= mean_theta;
    }
    let n_years = t_len.div_ceil(12);
    let year_eff = ar1_series(&mut rng, n_years, truth.year_rho, truth.year_sd);

    let mut rng = stream_rng(seed, &[hash_tag("synth-st"), 2]);
    let mut cases = vec![0i64; n * t_len];
    for t in 0..t_len {
        let m = months[t];
        for i in 0..n {
            let season = truth.month_amp
                * (phase(m) - 2.0 * std::f64::consts::PI * peaks[i] as f64 / 12.0).sin();
            let mu = if t < 3 {
                // Burn-in months carry only the level and season; the fit
                // masks them out of the likelihood.
                100_000.0 / 1e5 * (2.5 + season).exp()
            } else {
                let offset = ((cases[i * t_len + t - 3] as f64 + 1.0) / 100_000.0).ln();
                let eta = truth.alpha
                    + offset
                    + truth.beta_tmin * z_tmin(i, t)
                    + truth.beta_precip * z_precip(i, t)
                    + season
                    + year_eff[t / 12]
                    + theta[i];
                (100_000.0 * eta.exp()).min(1e6)
            };
            cases[i * t_len + t] = poisson_count(&mut rng, mu);
        }
    }

    let mut covariates = BTreeMap::new();
    for (name, unit, f) in
        [("tmin", "degC", &raw_tmin), ("precip", "mm", &raw_precip)]
    {
        let mut values = vec![0.0; n * t_len];
        for i in 0..n {
            for t in 0..t_len {
                values[i * t_len + t] = f.raw(i, t);
            }
        }
        covariates.insert(name.to_string(), Covariate { unit: unit.to_string(), values });
    }
    PanelParts {
        districts: names,
        months,
        cases,
        population,
        covariates,
        edges: grid_edges(n),
    }
    .build()
}

// ---------------------------------------------------------------------------
// Endemic-epidemic recovery

/// Ground truth for [`simulate_hhh4_panel`]; covariate pairs are (tavg,
/// precip) on the fitted lag-3 standardized scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Hhh4Recovery {
    pub nu_intercept: f64,
    pub lambda_intercept: f64,
    pub phi_intercept: f64,
    /// Endemic annual harmonic pair (sin, cos).
    pub harmonics: (f64, f64),
    pub beta_nu: (f64, f64),
    pub beta_lambda: (f64, f64),
    /// sd of the centred per-district intercept spread, all components.
    pub district_sd: f64,
    /// Power-law neighbourhood decay.
    pub decay: f64,
    /// Negative-binomial dispersion.
    pub dispersion: f64,
}

impl Default for Hhh4Recovery {
    fn default() -> Self {
        Hhh4Recovery {
            nu_intercept: 1.8,
            lambda_intercept: -1.05,
            phi_intercept: -2.3,
            harmonics: (0.6, -0.4),
            beta_nu: (0.5, -0.4),
            beta_lambda: (0.5, -0.4),
            district_sd: 0.12,
            decay: 2.0,
            dispersion: 8.0,
        }
    }
}

/// The endemic-epidemic spec matched to [`simulate_hhh4_panel`]: weather in
/// the endemic and epidemic components, no cumulative-incidence term. The
/// cumulative term is endogenous to the count history, which leaves it only
/// weakly identified on stationary simulations, so recovery experiments
/// exclude it.
pub fn hhh4_recovery_spec() -> ModelSpec {
    let mut spec = ModelSpec::preset("hhh4").expect("preset exists");
    let opts = spec.hhh4.as_mut().expect("hhh4 preset has options");
    opts.endemic_cumulative = false;
    opts.epidemic_cumulative = false;
    spec
}

/// Draw a panel from mu = nu + lambda Y_prev + phi (powerlaw neighbour sum),
/// negative-binomial observations.
pub fn simulate_hhh4_panel(
    n: usize,
    t_len: usize,
    t_end: usize,
    truth: &Hhh4Recovery,
    seed: u64,
) -> Result<PanelDataset> {
    if n < 3 || t_len < 48 || t_end > t_len || t_end < 48 {
        return Err(Error::invalid(
            "hhh4 recovery needs >= 3 districts and >= 48 training months",
        ));
    }
    let names = district_names(n);
    let start = YearMonth::new(2008, 1).expect("valid month");
    let months: Vec<YearMonth> = (0..t_len).map(|k| start.add_months(k as i64)).collect();
    let population = vec![120_000.0; n * t_len];
    let exposure = 1.2;

    let edge_names = grid_edges(n);
    let idx: BTreeMap<&str, usize> =
        names.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let edges_idx: Vec<(usize, usize)> =
        edge_names.iter().map(|(a, b)| (idx[a.as_str()], idx[b.as_str()])).collect();
    let graph = AdjacencyGraph::new(n, &edges_idx)?;
    let weights = powerlaw_weights(&graph, truth.decay)?;

    let mut rng = stream_rng(seed, &[hash_tag("synth-hhh4"), 0]);
    let mut raw_tavg = FeatureMatrix::new("tavg", n, t_len, 0);
    let mut raw_precip = FeatureMatrix::new("precip", n, t_len, 0);
    for i in 0..n {
        for (t, v) in ar1_series(&mut rng, t_len, 0.4, 0.9).into_iter().enumerate() {
            raw_tavg.set(i, t, 27.0 + 1.5 * v);
        }
        for (t, v) in ar1_series(&mut rng, t_len, 0.4, 0.9).into_iter().enumerate() {
            raw_precip.set(i, t, 170.0 + 55.0 * v);
        }
    }
    let z_tavg = fitted_scale(&raw_tavg, 3, t_end)?;
    let z_precip = fitted_scale(&raw_precip, 3, t_end)?;

    let mut rng = stream_rng(seed, &[hash_tag("synth-hhh4"), 1]);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut centred = |sd: f64, rng: &mut rand_chacha::ChaCha12Rng| -> Vec<f64> {
        let mut v: Vec<f64> = (0..n).map(|_| sd * noise.sample(rng)).collect();
        let m = v.iter().sum::<f64>() / n as f64;
        v.iter_mut().for_each(|x| *x -= m);
        v
    };
    let nu_dist = centred(truth.district_sd, &mut rng);
    let lam_dist = centred(truth.district_sd, &mut rng);
    let phi_dist = centred(truth.district_sd, &mut rng);

    let mut rng = stream_rng(seed, &[hash_tag("synth-hhh4"), 2]);
    let mut cases = vec![0i64; n * t_len];
    for t in 0..t_len {
        let m = months[t];
        let (sin, cos) = (phase(m).sin(), phase(m).cos());
        for i in 0..n {
            let nu = exposure
                * (truth.nu_intercept
                    + nu_dist[i]
                    + truth.harmonics.0 * sin
                    + truth.harmonics.1 * cos
                    + truth.beta_nu.0 * z_tavg(i, t)
                    + truth.beta_nu.1 * z_precip(i, t))
                .exp();
            let mu = if t == 0 {
                nu
            } else {
                let lambda = (truth.lambda_intercept
                    + lam_dist[i]
                    + truth.beta_lambda.0 * z_tavg(i, t)
                    + truth.beta_lambda.1 * z_precip(i, t))
                .exp();
                let phi = (truth.phi_intercept + phi_dist[i]).exp();
                let own = cases[i * t_len + t - 1] as f64;
                let neigh: f64 =
                    (0..n).map(|j| weights[(j, i)] * cases[j * t_len + t - 1] as f64).sum();
                (nu + lambda * own + phi * neigh).min(1e6)
            };
            cases[i * t_len + t] = negbin_count(&mut rng, mu, truth.dispersion);
        }
    }

    let mut covariates = BTreeMap::new();
    for (name, unit, f) in
        [("tavg", "degC", &raw_tavg), ("precip", "mm", &raw_precip)]
    {
        let mut values = vec![0.0; n * t_len];
        for i in 0..n {
            for t in 0..t_len {
                values[i * t_len + t] = f.raw(i, t);
            }
        }
        covariates.insert(name.to_string(), Covariate { unit: unit.to_string(), values });
    }
    PanelParts {
        districts: names,
        months,
        cases,
        population,
        covariates,
        edges: edge_names,
    }
    .build()
}

// ---------------------------------------------------------------------------
// Component-regression recovery

/// Ground truth for [`simulate_pcr_panel`], planted on district 0.
#[derive(Debug, Clone, PartialEq)]
pub struct PcrRecovery {
    /// Coefficient on the leading deseasonalized component score.
    pub beta_pc1: f64,
    /// Harmonic pair (sin, cos).
    pub harmonics: (f64, f64),
    /// Coefficient on lag-3 standardized temperature.
    pub beta_tavg: f64,
    /// Target log mean net of the population offset (mu = p exp(base + ...)).
    pub base: f64,
    /// Fixed-point regeneration rounds; the scores feeding the final panel
    /// come from the round before it.
    pub rounds: usize,
}

impl Default for PcrRecovery {
    fn default() -> Self {
        PcrRecovery {
            beta_pc1: 0.5,
            harmonics: (0.3, -0.2),
            beta_tavg: 0.4,
            base: -8.7,
            rounds: 3,
        }
    }
}

/// The component-regression spec matched to [`simulate_pcr_panel`]:
/// temperature as the single weather covariate.
pub fn pcr_recovery_spec() -> ModelSpec {
    let mut spec = ModelSpec::preset("pca").expect("preset exists");
    spec.pca.as_mut().expect("pca preset has options").covariates =
        vec![CovariateSpec::new("tavg", 3)];
    spec
}

/// Build a panel whose district 0 follows its own component regression.
///
/// Source districts carry a shared non-seasonal AR factor, so the leading
/// component is well defined. The target district is regenerated from the
/// regression equation for `rounds` passes; each pass recomputes the PCA
/// state on the freshly regenerated panel, converging toward a fixed point
/// where the state used for generation matches the state a fit will find.
pub fn simulate_pcr_panel(
    n: usize,
    t_len: usize,
    t_end: usize,
    truth: &PcrRecovery,
    seed: u64,
) -> Result<PanelDataset> {
    if n < 3 || t_len < 60 || t_end + 3 > t_len || t_end < 48 {
        return Err(Error::invalid(
            "pcr recovery needs >= 3 districts, >= 60 months, and 3 post-training months",
        ));
    }
    let spec = pcr_recovery_spec();
    let opts = spec.pca.clone().expect("recovery spec has options");
    let names = district_names(n);
    let start = YearMonth::new(2008, 1).expect("valid month");
    let months: Vec<YearMonth> = (0..t_len).map(|k| start.add_months(k as i64)).collect();
    let population = vec![100_000.0; n * t_len];
    let ln_pop = 100_000.0f64.ln();

    let mut rng = stream_rng(seed, &[hash_tag("synth-pcr"), 0]);
    let mut raw_tavg = FeatureMatrix::new("tavg", n, t_len, 0);
    for i in 0..n {
        for (t, v) in ar1_series(&mut rng, t_len, 0.4, 0.9).into_iter().enumerate() {
            raw_tavg.set(i, t, 27.0 + 1.5 * v);
        }
    }
    let z_tavg = fitted_scale(&raw_tavg, 3, t_end)?;

    // Source districts: shared AR factor plus district noise, no seasonality.
    let mut rng = stream_rng(seed, &[hash_tag("synth-pcr"), 1]);
    let factor = ar1_series(&mut rng, t_len, 0.7, 0.4);
    let mut cases = vec![0i64; n * t_len];
    for i in 1..n {
        for t in 0..t_len {
            let mu = (2.9 + factor[t] + 0.15 * (rng.gen::<f64>() - 0.5)).exp();
            cases[i * t_len + t] = poisson_count(&mut rng, mu);
        }
    }
    // Placeholder target so the first-round PCA state is well defined.
    for t in 0..t_len {
        let mu = (2.9 + factor[t]).exp();
        cases[t] = poisson_count(&mut rng, mu);
    }

    let mut covariates = BTreeMap::new();
    let mut tavg_values = vec![0.0; n * t_len];
    for i in 0..n {
        for t in 0..t_len {
            tavg_values[i * t_len + t] = raw_tavg.raw(i, t);
        }
    }
    covariates.insert("tavg".to_string(), Covariate { unit: "degC".into(), values: tavg_values });
    let mut parts = PanelParts {
        districts: names,
        months: months.clone(),
        cases,
        population,
        covariates,
        edges: grid_edges(n),
    };

    let mut count_rng = stream_rng(seed, &[hash_tag("synth-pcr"), 2]);
    let mut panel = parts.clone().build()?;
    for _ in 0..truth.rounds.max(1) {
        let extended = panel.extended(3);
        let bundle = incidence_bundle(&opts, &extended, t_end)?;
        let target: Vec<f64> =
            (0..extended.n_months()).map(|t| (1.0 + extended.incidence(0, t)).ln()).collect();
        let rescaled = y_aware_rescale(&bundle, &target, 0..t_end)?;
        let state = fit_pca(&rescaled, opts.n_components)?;
        let mut pcs = component_features(&state, &bundle, 0)?;
        seasonal_residual_scores(&mut pcs, &extended, 0, t_end)?;

        for t in 0..t_len {
            let eta = match pcs[0].get(0, t) {
                Some(pc1) => {
                    truth.base
                        + ln_pop
                        + truth.beta_pc1 * pc1
                        + truth.harmonics.0 * phase(months[t]).sin()
                        + truth.harmonics.1 * phase(months[t]).cos()
                        + truth.beta_tavg * z_tavg(0, t)
                }
                // Undefined-score months are masked out of the fit; keep them
                // at the baseline level.
                None => truth.base + ln_pop,
            };
            parts.cases[t] = poisson_count(&mut count_rng, eta.exp().min(1e6));
        }
        panel = parts.clone().build()?;
    }
    Ok(panel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::pca::pcr_coefficients;
    use crate::models::spatiotemporal::st_params;
    use crate::models::{fit, hhh4::hhh4_params};

    #[test]
    fn grid_edges_connect_every_district() {
        for n in [1usize, 2, 3, 4, 5, 9, 12, 20] {
            let edges = grid_edges(n);
            let idx: BTreeMap<String, usize> =
                district_names(n).into_iter().enumerate().map(|(i, s)| (s, i)).collect();
            let e: Vec<(usize, usize)> =
                edges.iter().map(|(a, b)| (idx[a], idx[b])).collect();
            if n == 1 {
                assert!(e.is_empty());
                continue;
            }
            let g = AdjacencyGraph::new(n, &e).unwrap();
            assert!((0..n).all(|i| (0..n).all(|j| g.order(i, j) < u16::MAX)));
        }
    }

    #[test]
    fn benchmark_panel_is_deterministic_and_structured() {
        let cfg = SynthConfig {
            n_districts: 6,
            n_months: 60,
            hotspot: Some(2),
            ..SynthConfig::default()
        };
        let (a, outbreaks_a) = generate_panel(&cfg, 7).unwrap();
        let (b, outbreaks_b) = generate_panel(&cfg, 7).unwrap();
        assert_eq!(outbreaks_a, outbreaks_b);
        assert!(
            (0..6).all(|i| (0..60).all(|t| a.cases(i, t) == b.cases(i, t))),
            "same seed must reproduce the panel"
        );
        let (c, _) = generate_panel(&cfg, 8).unwrap();
        assert!((0..6).any(|i| (0..60).any(|t| a.cases(i, t) != c.cases(i, t))));

        for name in ["tavg", "tmin", "precip"] {
            assert!(a.covariate(name).is_some(), "missing covariate {name}");
        }
        // The hotspot runs hot relative to the panel mean incidence.
        let mean_inc = |p: &PanelDataset, i: usize| -> f64 {
            (0..p.n_months()).map(|t| p.incidence(i, t)).sum::<f64>() / p.n_months() as f64
        };
        let hot = mean_inc(&a, 2);
        let rest: f64 = (0..6).filter(|&i| i != 2).map(|i| mean_inc(&a, i)).sum::<f64>() / 5.0;
        assert!(hot > 1.5 * rest, "hotspot {hot} vs rest {rest}");
        for o in &outbreaks_a {
            assert!(o.district < 6);
            assert!(o.duration >= 2 && o.duration <= 3);
        }
    }

    #[test]
    fn st_recovery_round_trip() {
        let truth = StRecovery::default();
        let panel = simulate_st_panel(8, 96, 96, &truth, 31).unwrap();
        let spec = ModelSpec::preset("st2").unwrap();
        let model = fit(&spec, &panel, 96).unwrap();
        let params = st_params(&model).unwrap();
        assert!(
            (params.betas[0] - truth.beta_tmin).abs() < 0.25 * truth.beta_tmin.abs(),
            "tmin beta {} vs {}",
            params.betas[0],
            truth.beta_tmin
        );
        assert!(
            (params.betas[1] - truth.beta_precip).abs() < 0.25 * truth.beta_precip.abs(),
            "precip beta {} vs {}",
            params.betas[1],
            truth.beta_precip
        );
    }

    #[test]
    fn hhh4_recovery_round_trip() {
        let truth = Hhh4Recovery::default();
        let panel = simulate_hhh4_panel(9, 96, 96, &truth, 41).unwrap();
        let spec = hhh4_recovery_spec();
        let model = fit(&spec, &panel, 96).unwrap();
        let p = hhh4_params(&model).unwrap();
        let close = |got: f64, want: f64, what: &str| {
            assert!(
                (got - want).abs() < 0.25 * want.abs(),
                "{what}: {got} vs {want}"
            );
        };
        let h = p.endemic.harmonics.expect("endemic harmonics");
        close(h.0, truth.harmonics.0, "sin");
        close(h.1, truth.harmonics.1, "cos");
        close(p.endemic.betas[0], truth.beta_nu.0, "nu tavg");
        close(p.endemic.betas[1], truth.beta_nu.1, "nu precip");
        close(p.epidemic.betas[0], truth.beta_lambda.0, "lambda tavg");
        close(p.epidemic.betas[1], truth.beta_lambda.1, "lambda precip");
        assert!(
            (p.dispersion - truth.dispersion).abs() < 0.5 * truth.dispersion,
            "dispersion {} vs {}",
            p.dispersion,
            truth.dispersion
        );
    }

    #[test]
    fn pcr_recovery_round_trip() {
        let truth = PcrRecovery::default();
        let panel = simulate_pcr_panel(6, 123, 120, &truth, 51).unwrap();
        let spec = pcr_recovery_spec();
        let model = fit(&spec, &panel, 120).unwrap();
        let coefs = pcr_coefficients(&model, 0).unwrap();
        assert!(
            (coefs["beta_pc01"] - truth.beta_pc1).abs() < 0.25 * truth.beta_pc1,
            "pc1 {} vs {}",
            coefs["beta_pc01"],
            truth.beta_pc1
        );
        assert!(
            (coefs["beta_tavg_lag3"] - truth.beta_tavg).abs() < 0.25 * truth.beta_tavg,
            "tavg {} vs {}",
            coefs["beta_tavg_lag3"],
            truth.beta_tavg
        );
        assert!(
            (coefs["season_sin"] - truth.harmonics.0).abs() < 0.25 * truth.harmonics.0.abs(),
            "sin {} vs {}",
            coefs["season_sin"],
            truth.harmonics.0
        );
    }
}
