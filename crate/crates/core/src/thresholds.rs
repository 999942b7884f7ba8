//! Outbreak definitions: four threshold rules producing per-(district, month)
//! labels, plus outbreak probabilities from forecast samples.
//!
//! "Above threshold" is strict exceedance everywhere; a count equal to its
//! threshold is not an outbreak.

use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::calendar::YearMonth;
use crate::error::{Error, Result};
use crate::panel::PanelDataset;
use crate::quantile::quantile;

/// Permitted fixed-rate levels, cases per 100,000.
pub const FIXED_RATE_LEVELS: [u32; 6] = [20, 50, 100, 150, 200, 300];

/// How far back the mean+2sd rule may reach for replacement years.
const MEAN2SD_LOOKBACK_YEARS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutbreakRule {
    /// Mean + 2 sd of recent same-month history with iterative exclusion of
    /// outbreak years.
    MeanPlus2Sd,
    /// 95th percentile of same-month history. Prospective mode uses only
    /// months strictly before the evaluated one; retrospective mode uses all
    /// years in the panel except the evaluated month itself.
    Percentile95 {
        #[serde(default)]
        retrospective: bool,
    },
    /// 97.5th percentile of simulated counts from a month-factor Poisson
    /// regression with population offset, propagating parameter uncertainty.
    PoissonGlm {
        #[serde(default = "default_n_sims")]
        n_sims: usize,
    },
    /// Fixed incidence level per 100,000.
    FixedRate { level: u32 },
}

fn default_n_sims() -> usize {
    10_000
}

impl OutbreakRule {
    pub fn fixed_rate(level: u32) -> Result<Self> {
        if FIXED_RATE_LEVELS.contains(&level) {
            Ok(OutbreakRule::FixedRate { level })
        } else {
            Err(Error::invalid(format!(
                "fixed rate level {level} not in {FIXED_RATE_LEVELS:?}"
            )))
        }
    }

    /// Stable identifier used in output files and config.
    pub fn name(&self) -> String {
        match self {
            OutbreakRule::MeanPlus2Sd => "mean_plus_2sd".into(),
            OutbreakRule::Percentile95 { retrospective: false } => "percentile_95".into(),
            OutbreakRule::Percentile95 { retrospective: true } => "percentile_95_retro".into(),
            OutbreakRule::PoissonGlm { .. } => "poisson_glm".into(),
            OutbreakRule::FixedRate { level } => format!("fixed_rate_{level}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean_plus_2sd" => Ok(OutbreakRule::MeanPlus2Sd),
            "percentile_95" => Ok(OutbreakRule::Percentile95 { retrospective: false }),
            "percentile_95_retro" => Ok(OutbreakRule::Percentile95 { retrospective: true }),
            "poisson_glm" => Ok(OutbreakRule::PoissonGlm { n_sims: default_n_sims() }),
            other => match other.strip_prefix("fixed_rate_") {
                Some(level) => {
                    let level = level
                        .parse()
                        .map_err(|_| Error::invalid(format!("bad rule name {other:?}")))?;
                    OutbreakRule::fixed_rate(level)
                }
                None => Err(Error::invalid(format!("unknown outbreak rule {other:?}"))),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutbreakLabel {
    Outbreak,
    NoOutbreak,
    Undefined,
}

impl fmt::Display for OutbreakLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutbreakLabel::Outbreak => "outbreak",
            OutbreakLabel::NoOutbreak => "no_outbreak",
            OutbreakLabel::Undefined => "undefined",
        })
    }
}

/// Threshold and label for one (district, month) under one rule.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutbreakRuleResult {
    /// In case-count units; `None` when the rule is undefined here.
    pub threshold: Option<f64>,
    pub label: OutbreakLabel,
    /// Number of historical values (or simulations) supporting the threshold.
    pub history: usize,
}

impl OutbreakRuleResult {
    fn undefined(history: usize) -> Self {
        OutbreakRuleResult { threshold: None, label: OutbreakLabel::Undefined, history }
    }

    fn from_threshold(threshold: f64, observed: f64, history: usize) -> Self {
        let label = if observed > threshold {
            OutbreakLabel::Outbreak
        } else {
            OutbreakLabel::NoOutbreak
        };
        OutbreakRuleResult { threshold: Some(threshold), label, history }
    }
}

/// Evaluate a rule against the observed count at (district, t).
///
/// The RNG is only consulted by the Poisson rule; pass a per-cell stream for
/// reproducibility.
pub fn evaluate_rule(
    rule: &OutbreakRule,
    panel: &PanelDataset,
    district: usize,
    t: usize,
    rng: &mut impl Rng,
) -> Result<OutbreakRuleResult> {
    let observed = f64::from(panel.cases(district, t));
    match *rule {
        OutbreakRule::MeanPlus2Sd => Ok(mean_2sd_threshold(panel, district, t, observed)),
        OutbreakRule::Percentile95 { retrospective } => {
            Ok(percentile95_threshold(panel, district, t, retrospective, observed))
        }
        OutbreakRule::PoissonGlm { n_sims } => {
            poisson_threshold(panel, district, t, n_sims, true, rng, observed)
        }
        OutbreakRule::FixedRate { level } => {
            if !FIXED_RATE_LEVELS.contains(&level) {
                return Err(Error::invalid(format!(
                    "fixed rate level {level} not in {FIXED_RATE_LEVELS:?}"
                )));
            }
            Ok(fixed_rate_threshold(panel, district, t, level, observed))
        }
    }
}

/// Threshold value only (no label), for forecast-month use where the count is
/// not yet observed. Undefined rules yield `None`.
pub fn threshold_value(
    rule: &OutbreakRule,
    panel: &PanelDataset,
    district: usize,
    t: usize,
    rng: &mut impl Rng,
) -> Result<Option<f64>> {
    // The observed count feeds only the label, which is discarded here.
    Ok(evaluate_rule(rule, panel, district, t, rng)?.threshold)
}

fn mean_2sd_threshold(
    panel: &PanelDataset,
    district: usize,
    t: usize,
    observed: f64,
) -> OutbreakRuleResult {
    // Same-calendar-month values, most recent year first, capped lookback.
    let mut pool = Vec::with_capacity(MEAN2SD_LOOKBACK_YEARS);
    for back in 1..=MEAN2SD_LOOKBACK_YEARS {
        let Some(s) = t.checked_sub(12 * back) else { break };
        pool.push(f64::from(panel.cases(district, s)));
    }
    // Iterative exclusion: values strictly above the provisional threshold
    // are dropped and replaced by older years until a fixpoint. With sample
    // sd and windows of <= 5 the max studentized deviation is (n-1)/sqrt(n)
    // < 2, so in practice the first window already is the fixpoint; the loop
    // keeps the documented procedure intact should the window ever widen.
    let mut window: Vec<f64> = pool.iter().copied().take(5).collect();
    let mut next = window.len();
    loop {
        if window.len() < 3 {
            return OutbreakRuleResult::undefined(window.len());
        }
        let n = window.len() as f64;
        let mean = window.iter().sum::<f64>() / n;
        let var = window.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let threshold = mean + 2.0 * var.sqrt();
        let before = window.len();
        window.retain(|&v| v <= threshold);
        let excluded = before - window.len();
        if excluded == 0 {
            return OutbreakRuleResult::from_threshold(threshold, observed, before);
        }
        for _ in 0..excluded {
            if next < pool.len() {
                window.push(pool[next]);
                next += 1;
            }
        }
    }
}

fn percentile95_threshold(
    panel: &PanelDataset,
    district: usize,
    t: usize,
    retrospective: bool,
    observed: f64,
) -> OutbreakRuleResult {
    let month = panel.month_of_year(t);
    let mut history = Vec::new();
    for s in 0..panel.n_months() {
        let in_scope = if retrospective { s != t } else { s < t };
        if in_scope && panel.month_of_year(s) == month {
            history.push(f64::from(panel.cases(district, s)));
        }
    }
    if history.len() < 5 {
        return OutbreakRuleResult::undefined(history.len());
    }
    let threshold = quantile(&mut history, 0.95);
    OutbreakRuleResult::from_threshold(threshold, observed, history.len())
}

fn poisson_threshold(
    panel: &PanelDataset,
    district: usize,
    t: usize,
    n_sims: usize,
    param_uncertainty: bool,
    rng: &mut impl Rng,
    observed: f64,
) -> Result<OutbreakRuleResult> {
    if t < 24 {
        return Ok(OutbreakRuleResult::undefined(t));
    }
    if n_sims == 0 {
        return Err(Error::invalid("poisson rule needs n_sims >= 1"));
    }
    // Month-factor Poisson regression with offset log p decouples across
    // months of year; only the target month's coefficient matters:
    // gamma_m = log(sum y / sum p), Var(gamma_m) = 1 / sum y.
    let month = panel.month_of_year(t);
    let (mut sum_y, mut sum_p) = (0.0f64, 0.0f64);
    for s in 0..t {
        if panel.month_of_year(s) == month {
            sum_y += f64::from(panel.cases(district, s));
            sum_p += panel.population(district, s);
        }
    }
    if sum_y <= 0.0 {
        // No events in the target month's history: the log-rate MLE diverges.
        return Ok(OutbreakRuleResult::undefined(0));
    }
    let gamma = (sum_y / sum_p).ln();
    let sd = if param_uncertainty { (1.0 / sum_y).sqrt() } else { 0.0 };
    let p_t = panel.population(district, t);
    let mut draws = Vec::with_capacity(n_sims);
    for _ in 0..n_sims {
        let g = gamma + sd * rng.sample::<f64, _>(rand_distr::StandardNormal);
        let lambda = p_t * g.exp();
        let y = Poisson::new(lambda)
            .map_err(|e| Error::numeric(format!("poisson simulation rate {lambda}: {e}")))?
            .sample(rng);
        draws.push(y);
    }
    let threshold = quantile(&mut draws, 0.975);
    Ok(OutbreakRuleResult::from_threshold(threshold, observed, n_sims))
}

fn fixed_rate_threshold(
    panel: &PanelDataset,
    district: usize,
    t: usize,
    level: u32,
    observed: f64,
) -> OutbreakRuleResult {
    let threshold = f64::from(level) * panel.population(district, t) / 1e5;
    OutbreakRuleResult::from_threshold(threshold, observed, 0)
}

/// Fraction of forecast samples strictly above the rule's threshold; `None`
/// when the threshold is undefined.
pub fn outbreak_probability(samples: &[f64], result: &OutbreakRuleResult) -> Result<Option<f64>> {
    if samples.is_empty() {
        return Err(Error::invalid("outbreak probability needs samples"));
    }
    Ok(result.threshold.map(|thr| {
        samples.iter().filter(|&&x| x > thr).count() as f64 / samples.len() as f64
    }))
}

/// One output row of the labeling pipeline.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelRow {
    pub district: String,
    pub month: YearMonth,
    pub rule: String,
    pub threshold: Option<f64>,
    pub label: OutbreakLabel,
    pub probability: Option<f64>,
}

/// Label every (district, month) cell of the panel under one rule.
pub fn label_panel(
    rule: &OutbreakRule,
    panel: &PanelDataset,
    seed: u64,
) -> Result<Vec<LabelRow>> {
    let mut rows = Vec::new();
    let rule_name = rule.name();
    for i in 0..panel.n_districts() {
        for t in 0..panel.n_months() {
            let mut rng = crate::num::stream_rng(
                seed,
                &[
                    crate::num::hash_tag("thresholds"),
                    crate::num::hash_tag(&rule_name),
                    i as u64,
                    t as u64,
                ],
            );
            let res = evaluate_rule(rule, panel, i, t, &mut rng)?;
            rows.push(LabelRow {
                district: panel.districts()[i].clone(),
                month: panel.month_at(t),
                rule: rule_name.clone(),
                threshold: res.threshold,
                label: res.label,
                probability: None,
            });
        }
    }
    Ok(rows)
}

/// Write `district,year,month,rule,threshold,label,probability`; undefined
/// fields are left empty.
pub fn write_labels_csv(path: impl AsRef<Path>, rows: &[LabelRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(|e| Error::data(e.to_string()))?;
    w.write_record(["district", "year", "month", "rule", "threshold", "label", "probability"])
        .map_err(|e| Error::data(e.to_string()))?;
    for r in rows {
        w.write_record([
            r.district.as_str(),
            &r.month.year.to_string(),
            &r.month.month.to_string(),
            r.rule.as_str(),
            &r.threshold.map(crate::panel::format_float).unwrap_or_default(),
            &r.label.to_string(),
            &r.probability.map(crate::panel::format_float).unwrap_or_default(),
        ])
        .map_err(|e| Error::data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
