//! Seasonal reference model: Poisson counts with a population offset, iid
//! district intercepts, and a per-district cyclic random walk over calendar
//! months. It carries no covariates and no trend, so it is the baseline any
//! forecasting model must beat.

use serde_json::json;

use crate::error::Result;
use crate::models::glm::OuterOptions;
use crate::models::lgm::{fit_lgm, Ar1Kind, LgmConfig, LgmFit, SpatialKind};
use crate::models::{FitDiagnostics, FittedInner, FittedModel, ModelSpec};
use crate::panel::PanelDataset;

pub(crate) fn fit_reference(
    spec: &ModelSpec,
    panel: &PanelDataset,
    t_end: usize,
) -> Result<FittedModel> {
    let extended = panel.extended(spec.max_horizon() as usize);
    let cfg = LgmConfig {
        fixed: Vec::new(),
        offsets: Vec::new(),
        month_rw: true,
        harmonics: false,
        spatial: SpatialKind::Iid,
        ar1: Ar1Kind::None,
        units: (0..panel.n_districts()).collect(),
    };
    let fit = fit_lgm(&extended, t_end, cfg, &OuterOptions::default())?;
    Ok(assemble(spec.clone(), fit))
}

pub(crate) fn assemble(spec: ModelSpec, fit: LgmFit) -> FittedModel {
    let diagnostics = FitDiagnostics {
        converged: fit.hyper.fit.converged,
        neg_objective: fit.hyper.fit.neg_objective,
        iterations: fit.hyper.fit.iterations,
        grad_norm: fit.hyper.fit.grad_norm,
        outer_evaluations: fit.hyper.outer_evaluations,
        log_marginal: Some(fit.hyper.log_posterior),
    };
    FittedModel {
        spec,
        trained_through: fit.origin(),
        diagnostics,
        inner: FittedInner::Lgm(fit),
    }
}

impl LgmFit {
    pub(crate) fn parameters_json(&self) -> serde_json::Value {
        json!({
            "alpha": self.alpha(),
            "coefficients": self.fixed_coefficients(),
            "district_effects": self.district_effects(),
            "month_effects": self.expanded_month_effects(),
            "year_effects": self.year_effects(),
            "hyperparameters": self.hypers_natural(),
            "districts": self.unit_names,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::tests::covariate_panel;
    use crate::models::{fit, ForecastDistribution, ModelFamily};
    use crate::panel::testsupport::toy_parts;

    fn reference_spec() -> ModelSpec {
        ModelSpec::preset("reference").unwrap()
    }

    #[test]
    fn constant_counts_are_reproduced_within_two_percent() {
        // Every district observes c=5 each month with constant population:
        // the fitted mean must sit within 2% of 5 in every cell.
        let panel = covariate_panel(3, 48);
        let model = fit(&reference_spec(), &panel, 45).unwrap();
        assert!(model.diagnostics.converged);
        let inner = match &model.inner {
            crate::models::FittedInner::Lgm(f) => f,
            _ => unreachable!(),
        };
        for slot in 0..3 {
            for t in [0, 17, 44] {
                let m = inner.mean_at(&panel, slot, t).unwrap();
                assert!((m - 5.0).abs() / 5.0 < 0.02, "cell ({slot},{t}): {m}");
            }
        }
    }

    #[test]
    fn fitted_rates_match_observed_means_per_district() {
        // Offset correctness: averaged over the training window, the fitted
        // rate must match each district's observed mean incidence within 2%,
        // including when counts differ across districts.
        let mut parts = toy_parts(4, 60);
        for i in 0..4 {
            for t in 0..60 {
                parts.cases[i * 60 + t] = 3 + 4 * i as i64;
            }
        }
        let panel = parts.build().unwrap();
        let model = fit(&reference_spec(), &panel, 57).unwrap();
        let inner = match &model.inner {
            crate::models::FittedInner::Lgm(f) => f,
            _ => unreachable!(),
        };
        for i in 0..4 {
            let fitted: f64 =
                (0..57).map(|t| inner.mean_at(&panel, i, t).unwrap()).sum::<f64>() / 57.0;
            let observed: f64 = (0..57).map(|t| f64::from(panel.cases(i, t))).sum::<f64>() / 57.0;
            let rel = (fitted - observed).abs() / observed;
            assert!(rel < 0.02, "district {i}: fitted {fitted} vs observed {observed}");
        }
    }

    #[test]
    fn month_effects_sum_to_zero_and_shrink_without_seasonality() {
        // Single district, aseasonal noisy counts: the cyclic-walk effects
        // must satisfy the sum-to-zero constraint exactly and stay below the
        // unpenalized per-month log deviations.
        let mut parts = toy_parts(1, 72);
        let wiggle = [7, 5, 6, 8, 5, 7, 6, 5, 8, 6, 7, 5];
        for t in 0..72 {
            parts.cases[t] = wiggle[t % 12];
        }
        let panel = parts.build().unwrap();
        let model = fit(&reference_spec(), &panel, 72).unwrap();
        let inner = match &model.inner {
            crate::models::FittedInner::Lgm(f) => f,
            _ => unreachable!(),
        };
        let effects = inner.expanded_month_effects().unwrap();
        let sum: f64 = effects[0].iter().sum();
        assert!(sum.abs() < 1e-9, "constraint violated: {sum}");

        // Unpenalized month effects: log of per-month mean over the overall mean.
        let overall: f64 = (0..72).map(|t| f64::from(panel.cases(0, t))).sum::<f64>() / 72.0;
        let unpenalized: Vec<f64> = (0..12)
            .map(|m| {
                let mean = (0..6).map(|k| f64::from(panel.cases(0, 12 * k + m))).sum::<f64>() / 6.0;
                (mean / overall).ln()
            })
            .collect();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(
            norm(&effects[0]) < norm(&unpenalized),
            "penalized {} vs saturated {}",
            norm(&effects[0]),
            norm(&unpenalized)
        );
    }

    #[test]
    fn predictive_means_are_invariant_to_district_relabeling() {
        // Exchangeability of iid effects: permuting district order (and the
        // graph with it) must not move any district's fitted mean.
        let mut parts = toy_parts(3, 48);
        for (i, c) in [4i64, 9, 6].into_iter().enumerate() {
            for t in 0..48 {
                parts.cases[i * 48 + t] = c;
            }
        }
        let panel = parts.build().unwrap();

        let mut swapped = toy_parts(3, 48);
        // Swap districts 0 and 2 by writing their series crosswise.
        for (i, c) in [6i64, 9, 4].into_iter().enumerate() {
            for t in 0..48 {
                swapped.cases[i * 48 + t] = c;
            }
        }
        let swapped = swapped.build().unwrap();

        let a = fit(&reference_spec(), &panel, 48).unwrap();
        let b = fit(&reference_spec(), &swapped, 48).unwrap();
        let (fa, fb) = match (&a.inner, &b.inner) {
            (crate::models::FittedInner::Lgm(x), crate::models::FittedInner::Lgm(y)) => (x, y),
            _ => unreachable!(),
        };
        for t in [5, 20] {
            let m0 = fa.mean_at(&panel, 0, t).unwrap();
            let m2 = fb.mean_at(&swapped, 2, t).unwrap();
            assert!((m0 - m2).abs() / m0 < 1e-3, "relabeled mean moved: {m0} vs {m2}");
        }
    }

    #[test]
    fn empty_training_window_is_a_precondition_error() {
        let panel = covariate_panel(2, 24);
        assert!(fit(&reference_spec(), &panel, 0).is_err());
    }

    #[test]
    fn forecast_is_deterministic_and_batch_consistent() {
        let panel = covariate_panel(3, 48);
        let model = fit(&reference_spec(), &panel, 45).unwrap();
        let batch = model.forecast_all(&panel, 1200, 42).unwrap();
        assert_eq!(batch.len(), 9);
        for d in &batch {
            d.check_scorable().unwrap();
            assert_eq!(d.origin, panel.month_at(44));
        }
        // A single-cell call reproduces the matching batch entry exactly.
        let single = model
            .forecast(&panel, "d01", panel.month_at(44), 2, 1200, 42)
            .unwrap();
        let from_batch: &ForecastDistribution =
            batch.iter().find(|d| d.district == "d01" && d.horizon == 2).unwrap();
        assert_eq!(&single, from_batch);

        // Wrong origin is a refit request, not a silent extrapolation.
        let err = model.forecast(&panel, "d01", panel.month_at(40), 1, 1200, 42).unwrap_err();
        assert!(err.to_string().contains("refit"), "{err}");
        assert_eq!(model.spec.family, ModelFamily::Reference);
    }

    #[test]
    fn fitted_model_serializes_with_version_and_parameters() {
        let panel = covariate_panel(2, 36);
        let model = fit(&reference_spec(), &panel, 36).unwrap();
        let doc = model.to_json();
        assert_eq!(doc["format_version"], 1);
        assert_eq!(doc["spec"]["family"], "reference");
        assert!(doc["parameters"]["alpha"].is_number());
        assert_eq!(doc["parameters"]["month_effects"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn single_draw_distribution_is_plumbing_only() {
        let panel = covariate_panel(2, 36);
        let model = fit(&reference_spec(), &panel, 36).unwrap();
        let one = model.forecast_all(&panel, 1, 7).unwrap();
        assert_eq!(one[0].sample_count(), 1);
        assert!(one[0].check_scorable().is_err());
    }
}
