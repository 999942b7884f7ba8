//! Pure feature engineering over a panel. Every output carries a validity
//! mask (undefined early-history cells are masked, never imputed) and a
//! `min_source_lag` recording how far back its inputs reach.

use crate::error::{Error, Result};
use crate::panel::{FeatureMatrix, PanelDataset};

/// Case counts shifted back by `L` months: out[i,t] = Y[i,t-L].
pub fn lag_cases(panel: &PanelDataset, lag: usize) -> Result<FeatureMatrix> {
    let t_len = panel.n_months();
    check_lag(lag, t_len)?;
    let n = panel.n_districts();
    let mut out = FeatureMatrix::new(format!("cases_lag{lag}"), n, t_len, lag);
    for i in 0..n {
        for t in lag..t_len {
            out.set(i, t, f64::from(panel.cases(i, t - lag)));
        }
    }
    Ok(out)
}

/// Autoregressive offset term log((Y[i,t-L] + 1) / p[i,a[t]]).
///
/// The +1 keeps zero counts finite; the population is the target month's,
/// so the term is an incidence-scale carry-forward of recent burden.
pub fn lagged_offset_term(panel: &PanelDataset, lag: usize) -> Result<FeatureMatrix> {
    let t_len = panel.n_months();
    check_lag(lag, t_len)?;
    let n = panel.n_districts();
    let mut out = FeatureMatrix::new(format!("log_lag{lag}_incidence"), n, t_len, lag);
    for i in 0..n {
        for t in lag..t_len {
            let y = f64::from(panel.cases(i, t - lag));
            out.set(i, t, ((y + 1.0) / panel.population(i, t)).ln());
        }
    }
    Ok(out)
}

/// log(1 + 100000 * sum of the previous `window` months' cases / p[i,a[t]]).
///
/// Masked until a full window of history exists.
pub fn cumulative_incidence(panel: &PanelDataset, window: usize) -> Result<FeatureMatrix> {
    let t_len = panel.n_months();
    if window == 0 || window >= t_len {
        return Err(Error::invalid(format!(
            "cumulative-incidence window {window} out of range for {t_len} months"
        )));
    }
    let n = panel.n_districts();
    let mut out = FeatureMatrix::new(format!("cum_incidence_{window}m"), n, t_len, 1);
    for i in 0..n {
        let mut running: f64 = 0.0;
        for t in 0..t_len {
            if t >= window {
                let p = panel.population(i, t);
                out.set(i, t, (1.0 + 1e5 * running / p).ln());
            }
            running += f64::from(panel.cases(i, t));
            if t >= window {
                running -= f64::from(panel.cases(i, t - window));
            }
        }
    }
    Ok(out)
}

/// Shift any feature back by `L` additional months; provenance lag accumulates.
pub fn lag_feature(feature: &FeatureMatrix, lag: usize) -> Result<FeatureMatrix> {
    let t_len = feature.n_months();
    check_lag(lag, t_len)?;
    let n = feature.n_districts();
    let mut out = FeatureMatrix::new(
        format!("{}_lag{lag}", feature.name),
        n,
        t_len,
        feature.min_source_lag + lag,
    );
    out.degenerate = feature.degenerate.clone();
    for i in 0..n {
        for t in lag..t_len {
            if let Some(v) = feature.get(i, t - lag) {
                out.set(i, t, v);
            }
        }
    }
    Ok(out)
}

/// Affine-map each district series to mean 0, sample sd 1 over the reference
/// month range; cells outside the range get the same map. Constant series map
/// to all-zero and are listed in `degenerate`.
pub fn standardize(
    feature: &FeatureMatrix,
    reference: std::ops::Range<usize>,
) -> Result<FeatureMatrix> {
    let t_len = feature.n_months();
    if reference.is_empty() || reference.end > t_len {
        return Err(Error::invalid(format!(
            "reference period {}..{} invalid for {} months",
            reference.start, reference.end, t_len
        )));
    }
    let n = feature.n_districts();
    let mut out = FeatureMatrix::new(
        format!("{}_std", feature.name),
        n,
        t_len,
        feature.min_source_lag,
    );
    for i in 0..n {
        let vals: Vec<f64> = reference.clone().filter_map(|t| feature.get(i, t)).collect();
        let (mean, sd) = if vals.len() >= 2 {
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
            (m, var.sqrt())
        } else {
            (vals.first().copied().unwrap_or(0.0), 0.0)
        };
        let degenerate = sd <= 0.0 || !sd.is_finite();
        if degenerate {
            out.degenerate.push(i);
        }
        for t in 0..t_len {
            if feature.is_defined(i, t) {
                let v = if degenerate { 0.0 } else { (feature.raw(i, t) - mean) / sd };
                out.set(i, t, v);
            }
        }
    }
    Ok(out)
}

fn check_lag(lag: usize, t_len: usize) -> Result<()> {
    if lag == 0 || lag >= t_len {
        Err(Error::invalid(format!("lag {lag} out of range 1..{t_len}")))
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::testsupport::toy_parts;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn panel_with_series(series: &[i64]) -> PanelDataset {
        let mut parts = toy_parts(2, series.len());
        parts.cases[..series.len()].copy_from_slice(series);
        parts.build().unwrap()
    }

    #[test]
    fn lag_shifts_and_masks() {
        let panel = panel_with_series(&[1, 2, 3, 4, 5]);
        let f = lag_cases(&panel, 3).unwrap();
        assert!(f.get(0, 0).is_none());
        assert!(f.get(0, 2).is_none());
        assert_eq!(f.get(0, 3), Some(1.0));
        assert_eq!(f.get(0, 4), Some(2.0));
        assert_eq!(f.min_source_lag, 3);
    }

    #[test]
    fn zero_lag_rejected() {
        let panel = panel_with_series(&[1, 2, 3, 4, 5]);
        assert!(lag_cases(&panel, 0).is_err());
        assert!(lag_cases(&panel, 5).is_err());
    }

    #[test]
    fn offset_term_of_zero_count() {
        let panel = panel_with_series(&[0, 0, 0, 0, 0, 0]);
        let f = lagged_offset_term(&panel, 3).unwrap();
        assert_abs_diff_eq!(f.get(0, 4).unwrap(), -11.5129, epsilon = 1e-4);
    }

    #[test]
    fn offset_term_scale_cancellation() {
        // (Y+1)/p == (2(Y+1))/(2p): compare two panels.
        let mut a = toy_parts(2, 6);
        a.cases = vec![99_999; 12];
        let pa = a.build().unwrap();
        let fa = lagged_offset_term(&pa, 3).unwrap();
        assert_abs_diff_eq!(fa.get(0, 4).unwrap(), 0.0, epsilon = 1e-12);

        let mut b = toy_parts(2, 6);
        b.cases = vec![199_999; 12];
        b.population = vec![200_000.0; 12];
        let pb = b.build().unwrap();
        let fb = lagged_offset_term(&pb, 3).unwrap();
        assert_abs_diff_eq!(fb.get(0, 4).unwrap(), fa.get(0, 4).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn cumulative_incidence_of_steady_burden() {
        let mut parts = toy_parts(2, 20);
        parts.cases = vec![10; 40];
        let panel = parts.build().unwrap();
        let f = cumulative_incidence(&panel, 12).unwrap();
        assert!(f.get(0, 11).is_none());
        // 12 months x 10 cases per 100k -> log(1 + 120)
        assert_abs_diff_eq!(f.get(0, 12).unwrap(), 121.0f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(f.get(0, 12).unwrap(), 4.7958, epsilon = 1e-4);
    }

    #[test]
    fn cumulative_incidence_zero_history() {
        let mut parts = toy_parts(1, 20);
        parts.cases = vec![0; 20];
        let panel = parts.build().unwrap();
        let f = cumulative_incidence(&panel, 12).unwrap();
        assert_eq!(f.get(0, 15), Some(0.0));
    }

    #[test]
    fn standardize_three_point_column() {
        let mut raw = FeatureMatrix::new("x", 1, 3, 0);
        for (t, v) in [1.0, 2.0, 3.0].iter().enumerate() {
            raw.set(0, t, *v);
        }
        let s = standardize(&raw, 0..3).unwrap();
        assert_abs_diff_eq!(s.get(0, 0).unwrap(), -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.get(0, 1).unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.get(0, 2).unwrap(), 1.0, epsilon = 1e-12);
        assert!(s.degenerate.is_empty());
    }

    #[test]
    fn standardize_constant_column_degenerate() {
        let mut raw = FeatureMatrix::new("x", 1, 4, 0);
        for t in 0..4 {
            raw.set(0, t, 7.5);
        }
        let s = standardize(&raw, 0..4).unwrap();
        assert_eq!(s.degenerate, vec![0]);
        for t in 0..4 {
            assert_eq!(s.get(0, t), Some(0.0));
        }
    }

    #[test]
    fn standardize_idempotent_on_nondegenerate() {
        let mut raw = FeatureMatrix::new("x", 1, 5, 0);
        for (t, v) in [3.0, -1.0, 4.0, 1.0, 5.0].iter().enumerate() {
            raw.set(0, t, *v);
        }
        let once = standardize(&raw, 0..5).unwrap();
        let twice = standardize(&once, 0..5).unwrap();
        for t in 0..5 {
            assert_abs_diff_eq!(once.get(0, t).unwrap(), twice.get(0, t).unwrap(), epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn lag_round_trip(series in proptest::collection::vec(0i64..10_000, 8..40), lag in 1usize..6) {
            prop_assume!(lag < series.len());
            let panel = panel_with_series(&series);
            let f = lag_cases(&panel, lag).unwrap();
            for t in lag..series.len() {
                prop_assert_eq!(f.get(0, t), Some(series[t - lag] as f64));
            }
            for t in 0..lag {
                prop_assert!(f.get(0, t).is_none());
            }
        }

        #[test]
        fn cumulative_incidence_monotone_in_cases(
            series in proptest::collection::vec(0i64..1000, 16..30),
            bump_at in 0usize..15,
        ) {
            let panel = panel_with_series(&series);
            let f = cumulative_incidence(&panel, 12).unwrap();
            let mut bumped = series.clone();
            bumped[bump_at] += 1;
            let panel2 = panel_with_series(&bumped);
            let g = cumulative_incidence(&panel2, 12).unwrap();
            for t in 12..series.len() {
                let (a, b) = (f.get(0, t).unwrap(), g.get(0, t).unwrap());
                // Adding a case anywhere never decreases any window sum.
                prop_assert!(b >= a - 1e-12);
            }
        }
    }
}
