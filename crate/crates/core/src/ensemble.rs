//! Inverse-CRPS² model weighting and predictive-sample pooling.
//!
//! Weights are computed once from cross-validation CRPS and then frozen: one
//! global vector, shared across districts, horizons, and time. Pooling
//! allocates a fixed total sample budget across component forecasts by
//! largest-remainder rounding and resamples each component's predictive
//! samples with replacement, so the pooled count is exact for any weight
//! vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ForecastDistribution;
use crate::num::{hash_tag, stream_rng};
use crate::quantile::central_interval;

/// Default pooled sample budget per forecast cell.
pub const DEFAULT_POOL_SIZE: usize = 10_000;

/// Normalized per-model combination weights, in model order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights {
    pub models: Vec<String>,
    pub weights: Vec<f64>,
    /// True when a zero-CRPS component forced a degenerate allocation.
    pub degenerate: bool,
}

impl EnsembleWeights {
    pub fn weight_for(&self, model: &str) -> Option<f64> {
        self.models.iter().position(|m| m == model).map(|k| self.weights[k])
    }

    /// Keep only `models`, renormalizing over the survivors. Used when some
    /// component failed to fit at an origin; the caller is expected to log
    /// the gap.
    pub fn restricted_to(&self, models: &[String]) -> Result<EnsembleWeights> {
        let mut keep = Vec::new();
        for m in models {
            let k = self
                .models
                .iter()
                .position(|n| n == m)
                .ok_or_else(|| Error::invalid(format!("model {m:?} has no weight")))?;
            keep.push((m.clone(), self.weights[k]));
        }
        let total: f64 = keep.iter().map(|(_, w)| w).sum();
        if total <= 0.0 {
            return Err(Error::invalid("no weight mass left after restriction"));
        }
        Ok(EnsembleWeights {
            models: keep.iter().map(|(m, _)| m.clone()).collect(),
            weights: keep.iter().map(|(_, w)| w / total).collect(),
            degenerate: self.degenerate,
        })
    }
}

/// Weight each model by the inverse square of its cross-validation CRPS,
/// normalized to sum to one. A zero-CRPS model is a degenerate perfect
/// forecaster: it absorbs all the weight (split evenly if several tie at
/// zero) and the result is flagged.
pub fn compute_weights(named_crps: &[(&str, f64)]) -> Result<EnsembleWeights> {
    if named_crps.is_empty() {
        return Err(Error::invalid("no models to weight"));
    }
    for (name, c) in named_crps {
        if !c.is_finite() || *c < 0.0 {
            return Err(Error::invalid(format!("CRPS for {name:?} must be finite and >= 0")));
        }
    }
    let models: Vec<String> = named_crps.iter().map(|(n, _)| (*n).to_string()).collect();
    let zeros = named_crps.iter().filter(|(_, c)| *c == 0.0).count();
    let weights: Vec<f64> = if zeros > 0 {
        named_crps
            .iter()
            .map(|(_, c)| if *c == 0.0 { 1.0 / zeros as f64 } else { 0.0 })
            .collect()
    } else {
        let inv: Vec<f64> = named_crps.iter().map(|(_, c)| 1.0 / (c * c)).collect();
        let total: f64 = inv.iter().sum();
        inv.iter().map(|v| v / total).collect()
    };
    debug_assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    Ok(EnsembleWeights { models, weights, degenerate: zeros > 0 })
}

/// Largest-remainder rounding of `n_total * weights[m]` to integers summing
/// to exactly `n_total`. Remainder ties go to the lower index.
pub fn allocate_samples(weights: &[f64], n_total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = Vec::with_capacity(weights.len());
    let mut rem: Vec<(usize, f64)> = Vec::with_capacity(weights.len());
    let mut used = 0usize;
    for (m, w) in weights.iter().enumerate() {
        let exact = w.max(0.0) * n_total as f64;
        let base = exact.floor() as usize;
        counts.push(base);
        rem.push((m, exact - base as f64));
        used += base;
    }
    // Stable sort keeps equal remainders in index order, so ties resolve low.
    rem.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite remainders"));
    for (m, _) in rem.into_iter().take(n_total.saturating_sub(used)) {
        counts[m] += 1;
    }
    counts
}

/// A pooled forecast: the combined sample set plus its central interval.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledForecast {
    pub forecast: ForecastDistribution,
    /// Samples drawn from each component, in component order.
    pub allocation: Vec<usize>,
    /// 2.5th / 50th / 97.5th percentiles of the pooled samples.
    pub lower: f64,
    pub median: f64,
    pub upper: f64,
}

/// Pool component forecasts for one (district, origin, horizon) cell.
///
/// `components` and `weights.models` must align one-to-one; every component
/// must describe the same cell. Each component contributes its
/// largest-remainder share of `n_total`, drawn with replacement from its own
/// samples on an RNG stream keyed by the cell, so pooling one cell never
/// perturbs another.
pub fn pool_samples(
    components: &[ForecastDistribution],
    weights: &EnsembleWeights,
    n_total: usize,
    seed: u64,
) -> Result<PooledForecast> {
    if components.is_empty() {
        return Err(Error::invalid("no component forecasts to pool"));
    }
    if components.len() != weights.models.len() {
        return Err(Error::invalid(format!(
            "{} component forecasts for {} weights",
            components.len(),
            weights.models.len()
        )));
    }
    if n_total == 0 {
        return Err(Error::invalid("pooled sample budget must be positive"));
    }
    let cell = (&components[0].district, components[0].origin, components[0].horizon);
    for c in components {
        if (&c.district, c.origin, c.horizon) != cell {
            return Err(Error::invalid(format!(
                "component cells disagree: {}/{} h{} vs {}/{} h{}",
                cell.0, cell.1, cell.2, c.district, c.origin, c.horizon
            )));
        }
        if c.samples.is_empty() {
            return Err(Error::missing(format!(
                "component forecast for {}/{} h{} has no samples",
                c.district, c.origin, c.horizon
            )));
        }
    }

    let allocation = allocate_samples(&weights.weights, n_total);
    let mut rng = stream_rng(
        seed,
        &[
            hash_tag("ensemble-pool"),
            cell.1.ordinal() as u64,
            hash_tag(cell.0),
            u64::from(cell.2),
        ],
    );
    let mut samples = Vec::with_capacity(n_total);
    for (c, &n_m) in components.iter().zip(&allocation) {
        for _ in 0..n_m {
            samples.push(c.samples[rng.gen_range(0..c.samples.len())]);
        }
    }
    debug_assert_eq!(samples.len(), n_total);
    let (lower, median, upper) = central_interval(&samples);
    Ok(PooledForecast {
        forecast: ForecastDistribution {
            district: cell.0.clone(),
            origin: cell.1,
            horizon: cell.2,
            samples,
        },
        allocation,
        lower,
        median,
        upper,
    })
}
