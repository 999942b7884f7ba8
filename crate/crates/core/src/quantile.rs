//! Type-7 (linear interpolation) quantiles, used uniformly for thresholds
//! and forecast percentiles.

use crate::num::Scalar;

/// Type-7 quantile of already-sorted data, p in [0, 1].
pub fn quantile_sorted<T: Scalar>(sorted: &[T], p: T) -> T {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = T::of_usize(n - 1) * p;
    let lo = h.floor().as_f64() as usize;
    let lo = lo.min(n - 2);
    let frac = h - T::of_usize(lo);
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

/// Type-7 quantile of unsorted data.
pub fn quantile<T: Scalar>(values: &[T], p: T) -> T {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("non-finite value in quantile input"));
    quantile_sorted(&v, p)
}

/// 2.5 / 50 / 97.5 percentile summary of a sample set.
pub fn central_interval<T: Scalar>(values: &[T]) -> (T, T, T) {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("non-finite value"));
    (
        quantile_sorted(&v, T::of(0.025)),
        quantile_sorted(&v, T::of(0.5)),
        quantile_sorted(&v, T::of(0.975)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn matches_hand_computed_type7() {
        // {1..19} at p=0.95: h = 18*0.95 = 17.1 -> 18 + 0.1*(19-18) = 18.1
        let v: Vec<f64> = (1..=19).map(f64::from).collect();
        assert_relative_eq!(quantile_sorted(&v, 0.95), 18.1, epsilon = 1e-12);
        // Median of even-length data interpolates
        assert_relative_eq!(quantile(&[4.0, 1.0, 3.0, 2.0], 0.5), 2.5, epsilon = 1e-12);
        // Endpoints
        assert_relative_eq!(quantile(&[2.0, 7.0, 5.0], 0.0), 2.0, epsilon = 1e-12);
        assert_relative_eq!(quantile(&[2.0, 7.0, 5.0], 1.0), 7.0, epsilon = 1e-12);
    }

    #[test]
    fn single_element_and_f32() {
        assert_relative_eq!(quantile(&[3.5f64], 0.9), 3.5);
        assert_relative_eq!(quantile(&[1.0f32, 2.0], 0.5), 1.5f32);
    }
}
