//! Core panel data model: district-by-month case counts, populations,
//! covariates, and the district adjacency graph.

mod features;
mod io;

pub use features::{cumulative_incidence, lag_cases, lag_feature, lagged_offset_term, standardize};
pub use io::{
    format_float, read_adjacency_edges, read_cases_csv, read_covariate_csv, write_covariate_csv,
};

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;

use crate::calendar::YearMonth;
use crate::error::{Error, Result};

/// Symmetric district neighbourhood with precomputed shortest-path orders.
#[derive(Debug, Clone)]
pub struct AdjacencyGraph {
    n: usize,
    neighbors: Vec<Vec<usize>>,
    /// o[j*n + i]: shortest-path neighbourhood order between districts j and i.
    order: Vec<u16>,
}

impl AdjacencyGraph {
    /// Build from an undirected edge list over district indices.
    ///
    /// Rejects self-loops, isolated districts, and disconnected graphs; the
    /// surveillance pipeline drops such districts upstream.
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::data(format!("edge ({a},{b}) out of range for {n} districts")));
            }
            if a == b {
                return Err(Error::data(format!("self-loop on district index {a}")));
            }
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for nb in &mut neighbors {
            nb.sort_unstable();
            nb.dedup();
        }
        // A one-district panel is legal; its graph is a single node.
        if n > 1 {
            if let Some(i) = neighbors.iter().position(Vec::is_empty) {
                return Err(Error::data(format!("district index {i} has no neighbours")));
            }
        }
        let order = bfs_orders(n, &neighbors)?;
        Ok(AdjacencyGraph { n, neighbors, order })
    }

    pub fn n_districts(&self) -> usize {
        self.n
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    /// Neighbourhood order o_{ji}; 0 on the diagonal, 1 for direct neighbours.
    pub fn order(&self, j: usize, i: usize) -> u16 {
        self.order[j * self.n + i]
    }

    pub fn max_order(&self) -> u16 {
        self.order.iter().copied().max().unwrap_or(0)
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (a, nbs) in self.neighbors.iter().enumerate() {
            for &b in nbs {
                if a < b {
                    out.push((a, b));
                }
            }
        }
        out
    }
}

fn bfs_orders(n: usize, neighbors: &[Vec<usize>]) -> Result<Vec<u16>> {
    let mut order = vec![u16::MAX; n * n];
    for start in 0..n {
        let mut queue = VecDeque::new();
        order[start * n + start] = 0;
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            let d = order[start * n + v];
            for &w in &neighbors[v] {
                if order[start * n + w] == u16::MAX {
                    order[start * n + w] = d + 1;
                    queue.push_back(w);
                }
            }
        }
        if order[start * n..(start + 1) * n].iter().any(|&d| d == u16::MAX) {
            return Err(Error::data("adjacency graph is not connected"));
        }
    }
    Ok(order)
}

/// Named covariate matrix aligned to the panel (n districts x T months).
#[derive(Debug, Clone)]
pub struct Covariate {
    pub unit: String,
    pub values: Vec<f64>,
}

/// Validated district-by-month surveillance panel.
#[derive(Debug, Clone)]
pub struct PanelDataset {
    districts: Vec<String>,
    months: Vec<YearMonth>,
    years: Vec<i32>,
    year_index: Vec<usize>,
    cases: Vec<u32>,
    /// n x n_years person counts, broadcast to months by step function.
    population: Vec<f64>,
    covariates: BTreeMap<String, Covariate>,
    adjacency: AdjacencyGraph,
}

/// Unvalidated panel ingredients; `violations` is the diagnostic surface and
/// `build` the enforcing constructor.
#[derive(Debug, Clone, Default)]
pub struct PanelParts {
    pub districts: Vec<String>,
    pub months: Vec<YearMonth>,
    /// n x T, row-major by district.
    pub cases: Vec<i64>,
    /// n x T person counts as read (monthly rows; must be constant within a year).
    pub population: Vec<f64>,
    pub covariates: BTreeMap<String, Covariate>,
    /// Undirected edges over district names.
    pub edges: Vec<(String, String)>,
}

/// One invariant violation discovered by [`PanelParts::violations`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    EmptyPanel,
    NonContiguousMonths { after: YearMonth },
    DimensionMismatch { what: String, expected: usize, actual: usize },
    NegativeCases { district: usize, month: usize, value: i64 },
    NonPositivePopulation { district: usize, month: usize, value: f64 },
    PopulationVariesWithinYear { district: usize, year: i32 },
    NonFiniteCovariate { name: String, district: usize, month: usize },
    UnknownDistrictInEdge { name: String },
    SelfLoop { district: String },
    IsolatedDistrict { district: usize },
    DisconnectedGraph,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyPanel => write!(f, "panel has no districts or no months"),
            Violation::NonContiguousMonths { after } => {
                write!(f, "months are not contiguous after {after}")
            }
            Violation::DimensionMismatch { what, expected, actual } => {
                write!(f, "{what}: expected {expected} values, got {actual}")
            }
            Violation::NegativeCases { district, month, value } => {
                write!(f, "cases[{district},{month}] = {value} is negative")
            }
            Violation::NonPositivePopulation { district, month, value } => {
                write!(f, "population[{district},{month}] = {value} is not positive")
            }
            Violation::PopulationVariesWithinYear { district, year } => {
                write!(f, "population for district {district} varies within year {year}")
            }
            Violation::NonFiniteCovariate { name, district, month } => {
                write!(f, "covariate {name}[{district},{month}] is not finite")
            }
            Violation::UnknownDistrictInEdge { name } => {
                write!(f, "adjacency references unknown district {name:?}")
            }
            Violation::SelfLoop { district } => write!(f, "self-loop on district {district:?}"),
            Violation::IsolatedDistrict { district } => {
                write!(f, "district {district} has no neighbours")
            }
            Violation::DisconnectedGraph => write!(f, "adjacency graph is not connected"),
        }
    }
}

impl PanelParts {
    /// Check every PanelDataset invariant; empty result means the parts build cleanly.
    pub fn violations(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        let n = self.districts.len();
        let t_len = self.months.len();
        if n == 0 || t_len == 0 {
            v.push(Violation::EmptyPanel);
            return v;
        }
        for w in self.months.windows(2) {
            if w[1] != w[0].next() {
                v.push(Violation::NonContiguousMonths { after: w[0] });
            }
        }
        if self.cases.len() != n * t_len {
            v.push(Violation::DimensionMismatch {
                what: "cases".into(),
                expected: n * t_len,
                actual: self.cases.len(),
            });
        }
        if self.population.len() != n * t_len {
            v.push(Violation::DimensionMismatch {
                what: "population".into(),
                expected: n * t_len,
                actual: self.population.len(),
            });
        }
        for (name, cov) in &self.covariates {
            if cov.values.len() != n * t_len {
                v.push(Violation::DimensionMismatch {
                    what: format!("covariate {name}"),
                    expected: n * t_len,
                    actual: cov.values.len(),
                });
            }
        }
        if self.cases.len() == n * t_len {
            for i in 0..n {
                for t in 0..t_len {
                    let c = self.cases[i * t_len + t];
                    if c < 0 {
                        v.push(Violation::NegativeCases { district: i, month: t, value: c });
                    }
                }
            }
        }
        if self.population.len() == n * t_len {
            for i in 0..n {
                let mut year_val: HashMap<i32, f64> = HashMap::new();
                let mut flagged_years: Vec<i32> = Vec::new();
                for t in 0..t_len {
                    let p = self.population[i * t_len + t];
                    if !(p > 0.0) || !p.is_finite() {
                        v.push(Violation::NonPositivePopulation { district: i, month: t, value: p });
                        continue;
                    }
                    let y = self.months[t].year;
                    match year_val.get(&y) {
                        None => {
                            year_val.insert(y, p);
                        }
                        Some(&prev) if prev != p && !flagged_years.contains(&y) => {
                            v.push(Violation::PopulationVariesWithinYear { district: i, year: y });
                            flagged_years.push(y);
                        }
                        _ => {}
                    }
                }
            }
        }
        for (name, cov) in &self.covariates {
            if cov.values.len() == n * t_len {
                for i in 0..n {
                    for t in 0..t_len {
                        if !cov.values[i * t_len + t].is_finite() {
                            v.push(Violation::NonFiniteCovariate {
                                name: name.clone(),
                                district: i,
                                month: t,
                            });
                        }
                    }
                }
            }
        }

        // Adjacency checks over names, then structure.
        let index: HashMap<&str, usize> =
            self.districts.iter().enumerate().map(|(i, d)| (d.as_str(), i)).collect();
        let mut idx_edges = Vec::new();
        let mut edge_names_ok = true;
        for (a, b) in &self.edges {
            let (ia, ib) = (index.get(a.as_str()), index.get(b.as_str()));
            match (ia, ib) {
                (Some(&ia), Some(&ib)) => {
                    if ia == ib {
                        v.push(Violation::SelfLoop { district: a.clone() });
                    } else {
                        idx_edges.push((ia, ib));
                    }
                }
                _ => {
                    let missing = if ia.is_none() { a } else { b };
                    v.push(Violation::UnknownDistrictInEdge { name: missing.clone() });
                    edge_names_ok = false;
                }
            }
        }
        if edge_names_ok && n > 1 {
            let mut neighbors = vec![Vec::new(); n];
            for &(a, b) in &idx_edges {
                neighbors[a].push(b);
                neighbors[b].push(a);
            }
            let mut any_isolated = false;
            for (i, nb) in neighbors.iter().enumerate() {
                if nb.is_empty() {
                    v.push(Violation::IsolatedDistrict { district: i });
                    any_isolated = true;
                }
            }
            if !any_isolated && bfs_orders(n, &neighbors).is_err() {
                v.push(Violation::DisconnectedGraph);
            }
        }
        v
    }

    /// Enforce the invariants and produce a validated panel.
    pub fn build(self) -> Result<PanelDataset> {
        let violations = self.violations();
        if !violations.is_empty() {
            let msgs: Vec<String> = violations.iter().take(8).map(ToString::to_string).collect();
            return Err(Error::data(format!(
                "panel has {} invariant violation(s): {}",
                violations.len(),
                msgs.join("; ")
            )));
        }
        let n = self.districts.len();
        let t_len = self.months.len();
        let mut years = Vec::new();
        let mut year_index = Vec::with_capacity(t_len);
        for m in &self.months {
            if years.last() != Some(&m.year) {
                years.push(m.year);
            }
            year_index.push(years.len() - 1);
        }
        let n_years = years.len();
        let mut population = vec![0.0; n * n_years];
        for i in 0..n {
            for t in 0..t_len {
                population[i * n_years + year_index[t]] = self.population[i * t_len + t];
            }
        }
        let cases = self.cases.iter().map(|&c| c as u32).collect();

        let index: HashMap<&str, usize> =
            self.districts.iter().enumerate().map(|(i, d)| (d.as_str(), i)).collect();
        let idx_edges: Vec<(usize, usize)> = self
            .edges
            .iter()
            .map(|(a, b)| (index[a.as_str()], index[b.as_str()]))
            .collect();
        let adjacency = AdjacencyGraph::new(n, &idx_edges)?;

        Ok(PanelDataset {
            districts: self.districts,
            months: self.months,
            years,
            year_index,
            cases,
            population,
            covariates: self.covariates,
            adjacency,
        })
    }
}

/// Diagnostic check: empty iff every panel invariant holds.
pub fn validate(parts: &PanelParts) -> Vec<Violation> {
    parts.violations()
}

impl PanelDataset {
    pub fn n_districts(&self) -> usize {
        self.districts.len()
    }

    pub fn n_months(&self) -> usize {
        self.months.len()
    }

    pub fn districts(&self) -> &[String] {
        &self.districts
    }

    pub fn district_index(&self, name: &str) -> Option<usize> {
        self.districts.iter().position(|d| d == name)
    }

    pub fn months(&self) -> &[YearMonth] {
        &self.months
    }

    pub fn month_at(&self, t: usize) -> YearMonth {
        self.months[t]
    }

    /// Index of a calendar month within the panel, if covered.
    pub fn index_of(&self, ym: YearMonth) -> Option<usize> {
        let d = ym.months_since(self.months[0]);
        if d < 0 || d as usize >= self.months.len() {
            None
        } else {
            Some(d as usize)
        }
    }

    pub fn years(&self) -> &[i32] {
        &self.years
    }

    /// a[t]: index of month t's calendar year within `years`.
    pub fn year_index(&self, t: usize) -> usize {
        self.year_index[t]
    }

    /// m[t]: month-of-year of month t, 1-12.
    pub fn month_of_year(&self, t: usize) -> u8 {
        self.months[t].month
    }

    pub fn cases(&self, i: usize, t: usize) -> u32 {
        self.cases[i * self.months.len() + t]
    }

    /// p[i, a[t]]: yearly population broadcast to month t.
    pub fn population(&self, i: usize, t: usize) -> f64 {
        self.population[i * self.years.len() + self.year_index[t]]
    }

    /// Population for a month possibly beyond the panel end; the final
    /// year's value extends forward (step-function broadcast).
    pub fn population_at(&self, i: usize, ym: YearMonth) -> f64 {
        let y_idx = match self.years.binary_search(&ym.year) {
            Ok(k) => k,
            Err(k) => k.saturating_sub(1).min(self.years.len() - 1),
        };
        self.population[i * self.years.len() + y_idx]
    }

    pub fn covariates(&self) -> &BTreeMap<String, Covariate> {
        &self.covariates
    }

    pub fn covariate(&self, name: &str) -> Option<&Covariate> {
        self.covariates.get(name)
    }

    pub fn covariate_value(&self, name: &str, i: usize, t: usize) -> Option<f64> {
        self.covariates.get(name).map(|c| c.values[i * self.months.len() + t])
    }

    pub fn adjacency(&self) -> &AdjacencyGraph {
        &self.adjacency
    }

    /// Incidence per 100,000 population at (i, t).
    pub fn incidence(&self, i: usize, t: usize) -> f64 {
        1e5 * f64::from(self.cases(i, t)) / self.population(i, t)
    }

    /// Restrict to the first `t_end` months (training-window view). Shares no
    /// state with self; covariates and adjacency are copied.
    pub fn truncated(&self, t_end: usize) -> PanelDataset {
        assert!(t_end >= 1 && t_end <= self.n_months());
        let n = self.n_districts();
        let t_full = self.n_months();
        let months: Vec<YearMonth> = self.months[..t_end].to_vec();
        let mut years = Vec::new();
        let mut year_index = Vec::with_capacity(t_end);
        for m in &months {
            if years.last() != Some(&m.year) {
                years.push(m.year);
            }
            year_index.push(years.len() - 1);
        }
        let mut cases = Vec::with_capacity(n * t_end);
        for i in 0..n {
            cases.extend_from_slice(&self.cases[i * t_full..i * t_full + t_end]);
        }
        let n_years = years.len();
        let mut population = vec![0.0; n * n_years];
        for i in 0..n {
            for (y_idx, _) in years.iter().enumerate() {
                population[i * n_years + y_idx] = self.population[i * self.years.len() + y_idx];
            }
        }
        let covariates = self
            .covariates
            .iter()
            .map(|(name, cov)| {
                let mut vals = Vec::with_capacity(n * t_end);
                for i in 0..n {
                    vals.extend_from_slice(&cov.values[i * t_full..i * t_full + t_end]);
                }
                (name.clone(), Covariate { unit: cov.unit.clone(), values: vals })
            })
            .collect();
        PanelDataset {
            districts: self.districts.clone(),
            months,
            years,
            year_index,
            cases,
            population,
            covariates,
            adjacency: self.adjacency.clone(),
        }
    }
}

impl PanelDataset {
    /// Clone with `extra` placeholder months appended so lag features can be
    /// evaluated past the observed range at forecast time. Appended cases and
    /// covariate cells are zero and must never be read directly: every
    /// feature consumed at horizon h carries `min_source_lag >= h`, which
    /// keeps its reads at or before the last observed month. Population for
    /// appended months extends the final observed year forward.
    pub(crate) fn extended(&self, extra: usize) -> PanelDataset {
        if extra == 0 {
            return self.clone();
        }
        let n = self.n_districts();
        let t_full = self.n_months();
        let t_ext = t_full + extra;

        let mut months = self.months.clone();
        for _ in 0..extra {
            months.push(months.last().copied().expect("panel is non-empty").next());
        }
        let mut years = Vec::new();
        let mut year_index = Vec::with_capacity(t_ext);
        for m in &months {
            if years.last() != Some(&m.year) {
                years.push(m.year);
            }
            year_index.push(years.len() - 1);
        }

        let widen_rows = |src: &[f64]| -> Vec<f64> {
            let mut out = Vec::with_capacity(n * t_ext);
            for i in 0..n {
                out.extend_from_slice(&src[i * t_full..(i + 1) * t_full]);
                out.extend(std::iter::repeat(0.0).take(extra));
            }
            out
        };

        let mut cases = Vec::with_capacity(n * t_ext);
        for i in 0..n {
            cases.extend_from_slice(&self.cases[i * t_full..(i + 1) * t_full]);
            cases.extend(std::iter::repeat(0u32).take(extra));
        }

        let n_years = years.len();
        let old_years = self.years.len();
        let mut population = vec![0.0; n * n_years];
        for i in 0..n {
            for y_idx in 0..n_years {
                let src = y_idx.min(old_years - 1);
                population[i * n_years + y_idx] = self.population[i * old_years + src];
            }
        }

        let covariates = self
            .covariates
            .iter()
            .map(|(name, cov)| {
                (
                    name.clone(),
                    Covariate { unit: cov.unit.clone(), values: widen_rows(&cov.values) },
                )
            })
            .collect();

        PanelDataset {
            districts: self.districts.clone(),
            months,
            years,
            year_index,
            cases,
            population,
            covariates,
            adjacency: self.adjacency.clone(),
        }
    }
}

/// A derived feature aligned to the panel, with a validity mask and source-lag
/// provenance for the leakage audit.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub name: String,
    n: usize,
    t_len: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
    /// Smallest `t - source_month` over the inputs feeding cell (i, t).
    /// 0 means the value uses month t itself.
    pub min_source_lag: usize,
    /// Districts whose series was constant over the standardization window.
    pub degenerate: Vec<usize>,
}

impl FeatureMatrix {
    pub fn new(name: impl Into<String>, n: usize, t_len: usize, min_source_lag: usize) -> Self {
        FeatureMatrix {
            name: name.into(),
            n,
            t_len,
            values: vec![0.0; n * t_len],
            mask: vec![false; n * t_len],
            min_source_lag,
            degenerate: Vec::new(),
        }
    }

    /// Wrap a raw covariate (no lag, fully defined).
    pub fn from_covariate(name: &str, panel: &PanelDataset) -> Option<Self> {
        let cov = panel.covariate(name)?;
        let (n, t_len) = (panel.n_districts(), panel.n_months());
        Some(FeatureMatrix {
            name: name.to_string(),
            n,
            t_len,
            values: cov.values.clone(),
            mask: vec![true; n * t_len],
            min_source_lag: 0,
            degenerate: Vec::new(),
        })
    }

    pub fn n_districts(&self) -> usize {
        self.n
    }

    pub fn n_months(&self) -> usize {
        self.t_len
    }

    pub fn get(&self, i: usize, t: usize) -> Option<f64> {
        if self.mask[i * self.t_len + t] {
            Some(self.values[i * self.t_len + t])
        } else {
            None
        }
    }

    pub fn is_defined(&self, i: usize, t: usize) -> bool {
        self.mask[i * self.t_len + t]
    }

    pub fn set(&mut self, i: usize, t: usize, v: f64) {
        self.values[i * self.t_len + t] = v;
        self.mask[i * self.t_len + t] = true;
    }

    pub fn clear(&mut self, i: usize, t: usize) {
        self.mask[i * self.t_len + t] = false;
    }

    /// Value ignoring the mask; only scoring/diagnostic code should use this.
    pub fn raw(&self, i: usize, t: usize) -> f64 {
        self.values[i * self.t_len + t]
    }
}

#[cfg(test)]
pub(crate) mod testsupport {
    use super::*;

    /// Constant panel over a path graph d00 - d01 - ... for feature tests.
    pub(crate) fn toy_parts(n: usize, t_len: usize) -> PanelParts {
        let districts: Vec<String> = (0..n).map(|i| format!("d{i:02}")).collect();
        let start = YearMonth::new(2010, 1).unwrap();
        let months: Vec<YearMonth> = (0..t_len).map(|k| start.add_months(k as i64)).collect();
        let cases = vec![5i64; n * t_len];
        let population = vec![100_000.0; n * t_len];
        let edges = (0..n.saturating_sub(1))
            .map(|i| (format!("d{i:02}"), format!("d{:02}", i + 1)))
            .collect();
        PanelParts { districts, months, cases, population, covariates: BTreeMap::new(), edges }
    }
}
