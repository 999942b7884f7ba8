//! Sample-based forecast scores (CRPS, bias, diffuseness), outbreak
//! probability scores (Brier, calibration), and confusion-matrix metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calendar::YearMonth;
use crate::error::{Error, Result};

/// Mean absolute difference over all ordered sample pairs, diagonal included:
/// (1/n^2) sum_ij |x_i - x_j|. Computed from the sorted order in O(n log n).
fn mean_abs_pair_diff(samples: &[f64]) -> f64 {
    let n = samples.len();
    if n < 2 {
        return 0.0;
    }
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // sum_{i<j} (x_j - x_i) = sum_k (2k - n + 1) x_k for 0-based k.
    let mut acc = 0.0;
    for (k, &x) in xs.iter().enumerate() {
        acc += (2.0 * k as f64 - n as f64 + 1.0) * x;
    }
    2.0 * acc / (n as f64 * n as f64)
}

/// Continuous ranked probability score of an empirical sample forecast
/// against an observed count, in the energy form
/// mean|X - y| - (1/2) mean|X - X'|.
pub fn crps(samples: &[f64], observed: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("crps needs at least one sample"));
    }
    let n = samples.len() as f64;
    let term1 = samples.iter().map(|x| (x - observed).abs()).sum::<f64>() / n;
    Ok(term1 - 0.5 * mean_abs_pair_diff(samples))
}

/// Forecast bias 1 - 2*F(y) where F is the empirical CDF with midpoint tie
/// handling: F(y) = (#below + #equal/2) / n. Range [-1, 1]; positive means
/// the forecast mass sits above the observation.
pub fn bias(samples: &[f64], observed: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("bias needs at least one sample"));
    }
    let n = samples.len() as f64;
    let below = samples.iter().filter(|&&x| x < observed).count() as f64;
    let equal = samples.iter().filter(|&&x| x == observed).count() as f64;
    Ok(1.0 - 2.0 * ((below + equal / 2.0) / n))
}

/// Normalized predictive dispersion: mean|X - X'| / (1 + mean(X)).
pub fn diffuseness(samples: &[f64]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::invalid("diffuseness needs at least two samples"));
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    Ok(mean_abs_pair_diff(samples) / (1.0 + mean))
}

/// Mean squared probability error over defined (probability, outcome) pairs.
/// `None` when the input is empty (all labels undefined).
pub fn brier(probabilities: &[f64], outcomes: &[bool]) -> Result<Option<f64>> {
    if probabilities.len() != outcomes.len() {
        return Err(Error::invalid("brier inputs differ in length"));
    }
    if probabilities.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::invalid("brier probabilities must lie in [0,1]"));
    }
    if probabilities.is_empty() {
        return Ok(None);
    }
    let sum: f64 = probabilities
        .iter()
        .zip(outcomes)
        .map(|(p, &o)| {
            let o = if o { 1.0 } else { 0.0 };
            (p - o) * (p - o)
        })
        .sum();
    Ok(Some(sum / probabilities.len() as f64))
}

/// One reliability-diagram bin.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationBin {
    /// Inclusive lower edge; bins are [k/10, (k+1)/10), the last closed at 1.
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_predicted: Option<f64>,
    pub observed_frequency: Option<f64>,
}

/// Ten fixed-width probability bins with per-bin mean prediction and
/// observed outbreak frequency.
pub fn calibration_bins(probabilities: &[f64], outcomes: &[bool]) -> Result<Vec<CalibrationBin>> {
    if probabilities.len() != outcomes.len() {
        return Err(Error::invalid("calibration inputs differ in length"));
    }
    if probabilities.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::invalid("calibration probabilities must lie in [0,1]"));
    }
    let mut sums = [0.0f64; 10];
    let mut hits = [0usize; 10];
    let mut counts = [0usize; 10];
    for (&p, &o) in probabilities.iter().zip(outcomes) {
        let k = ((p * 10.0).floor() as usize).min(9); // p = 1 joins the top bin
        counts[k] += 1;
        sums[k] += p;
        hits[k] += usize::from(o);
    }
    Ok((0..10)
        .map(|k| {
            let count = counts[k];
            CalibrationBin {
                lower: k as f64 / 10.0,
                upper: (k + 1) as f64 / 10.0,
                count,
                mean_predicted: (count > 0).then(|| sums[k] / count as f64),
                observed_frequency: (count > 0).then(|| hits[k] as f64 / count as f64),
            }
        })
        .collect())
}

/// Confusion-matrix ratios; each is `None` when its denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassificationMetrics {
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub ppv: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

pub fn classification_metrics(predicted: &[bool], observed: &[bool]) -> Result<ClassificationMetrics> {
    if predicted.len() != observed.len() {
        return Err(Error::invalid("classification inputs differ in length"));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &o) in predicted.iter().zip(observed) {
        match (p, o) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok(ClassificationMetrics {
        accuracy: ratio(tp + tn, tp + fp + tn + fn_),
        sensitivity: ratio(tp, tp + fn_),
        specificity: ratio(tn, tn + fp),
        ppv: ratio(tp, tp + fp),
        tp,
        fp,
        tn,
        fn_,
    })
}

/// Metric identifiers used in score tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Crps,
    Bias,
    Diffuseness,
    Brier,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Crps => "crps",
            Metric::Bias => "bias",
            Metric::Diffuseness => "diffuseness",
            Metric::Brier => "brier",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "crps" => Ok(Metric::Crps),
            "bias" => Ok(Metric::Bias),
            "diffuseness" => Ok(Metric::Diffuseness),
            "brier" => Ok(Metric::Brier),
            other => Err(Error::data(format!("unknown metric {other:?}"))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One scored forecast unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub district: String,
    pub origin: YearMonth,
    pub horizon: u8,
    pub metric: Metric,
    pub value: f64,
}

/// Long-format score store with grouping views.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupBy {
    District,
    /// Calendar month of the forecast target (origin advanced by horizon).
    Month,
    Horizon,
    Overall,
}

/// Group mean for one metric.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub group: String,
    pub metric: Metric,
    pub value: f64,
    pub n: usize,
}

impl ScoreTable {
    pub fn push(&mut self, district: &str, origin: YearMonth, horizon: u8, metric: Metric, value: f64) {
        self.rows.push(ScoreRow {
            district: district.to_string(),
            origin,
            horizon,
            metric,
            value,
        });
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Mean of one metric over all rows carrying it.
    pub fn mean(&self, metric: Metric) -> Option<f64> {
        let vals: Vec<f64> =
            self.rows.iter().filter(|r| r.metric == metric).map(|r| r.value).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// Arithmetic mean within groups, per metric. Group keys are strings:
    /// district name, target month "1".."12", horizon "1".."3", or "overall".
    pub fn aggregate(&self, by: GroupBy) -> Vec<AggregateRow> {
        let mut acc: BTreeMap<(String, Metric), (f64, usize)> = BTreeMap::new();
        for r in &self.rows {
            let key = match by {
                GroupBy::District => r.district.clone(),
                GroupBy::Month => {
                    let target = r.origin.add_months(i64::from(r.horizon));
                    format!("{:02}", target.month)
                }
                GroupBy::Horizon => r.horizon.to_string(),
                GroupBy::Overall => "overall".to_string(),
            };
            let e = acc.entry((key, r.metric)).or_insert((0.0, 0));
            e.0 += r.value;
            e.1 += 1;
        }
        acc.into_iter()
            .map(|((group, metric), (sum, n))| AggregateRow {
                group,
                metric,
                value: sum / n as f64,
                n,
            })
            .collect()
    }

    /// Canonical row order: district, origin, horizon, metric.
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| {
            (&a.district, a.origin, a.horizon, a.metric).cmp(&(
                &b.district,
                b.origin,
                b.horizon,
                b.metric,
            ))
        });
    }

    /// Write `district,origin_year,origin_month,horizon,metric,value` rows
    /// in canonical order.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut sorted = self.clone();
        sorted.sort();
        let mut w = csv::Writer::from_path(path.as_ref())
            .map_err(|e| Error::data(e.to_string()))?;
        w.write_record(["district", "origin_year", "origin_month", "horizon", "metric", "value"])
            .map_err(|e| Error::data(e.to_string()))?;
        for r in &sorted.rows {
            w.write_record([
                r.district.as_str(),
                &r.origin.year.to_string(),
                &r.origin.month.to_string(),
                &r.horizon.to_string(),
                r.metric.as_str(),
                &crate::panel::format_float(r.value),
            ])
            .map_err(|e| Error::data(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
            let get = |i: usize| rec.get(i).unwrap_or("").trim();
            let origin = YearMonth::new(
                get(1).parse().map_err(|e| Error::data(format!("bad origin_year: {e}")))?,
                get(2).parse().map_err(|e| Error::data(format!("bad origin_month: {e}")))?,
            )?;
            rows.push(ScoreRow {
                district: get(0).to_string(),
                origin,
                horizon: get(3).parse().map_err(|e| Error::data(format!("bad horizon: {e}")))?,
                metric: Metric::parse(get(4))?,
                value: get(5).parse().map_err(|e| Error::data(format!("bad value: {e}")))?,
            });
        }
        Ok(ScoreTable { rows })
    }
}
