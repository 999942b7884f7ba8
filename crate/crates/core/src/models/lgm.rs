//! Shared latent-Gaussian Poisson engine behind the reference,
//! spatiotemporal, and principal-component families. A family assembles its
//! feature bundle and effect flags into an [`LgmConfig`]; the engine builds
//! the sparse design, chooses hyperparameters by Laplace-marginal search, and
//! serves predictive count samples from the Gaussian posterior at the mode.

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::Arc;

use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::calendar::YearMonth;
use crate::error::{Error, Result};
use crate::models::design::{Design, Penalty, PenaltyBlock};
use crate::models::effects::{ar1_log_det, ar1_precision, besag, cyclic_rw1, EffectStructure};
use crate::models::glm::{
    correlation_log_prior, log_sd_half_normal_prior, maximize_laplace_marginal,
    proportion_log_prior, HyperFit, OuterOptions,
};
use crate::models::ForecastDistribution;
use crate::num::{hash_tag, stream_rng};
use crate::panel::{FeatureMatrix, PanelDataset};

/// Predictive log-means are capped here before the count draw; e^25 is far
/// above any plausible district count and keeps extreme posterior tails from
/// producing non-finite samples.
const MAX_LOG_MEAN: f64 = 25.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum SpatialKind {
    None,
    Iid,
    Besag,
    Bym2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Ar1Kind {
    None,
    Shared,
    PerDistrict,
}

/// Assembled model ingredients, all features on the extended timeline.
#[derive(Clone)]
pub(crate) struct LgmConfig {
    /// Free-coefficient covariates, N(0,1) priors.
    pub fixed: Vec<FeatureMatrix>,
    /// Unit-coefficient terms added to the offset.
    pub offsets: Vec<FeatureMatrix>,
    /// Per-district cyclic random walk over calendar months, shared hyper-sd.
    pub month_rw: bool,
    /// Annual sine/cosine pair as fixed effects.
    pub harmonics: bool,
    pub spatial: SpatialKind,
    pub ar1: Ar1Kind,
    /// Panel district indices covered by this fit (all districts normally;
    /// a single district for per-district families).
    pub units: Vec<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub n_cols: usize,
    pub n_units: usize,
    /// Training years spanned by the AR(1) effect.
    pub n_years: usize,
    pub fixed: Range<usize>,
    pub harmonics: Option<(usize, usize)>,
    pub month_start: Option<usize>,
    pub iid_start: Option<usize>,
    pub besag_start: Option<usize>,
    pub bym2_start: Option<(usize, usize)>,
    pub ar1_start: Option<usize>,
    pub ar1_per_district: bool,
    pub names: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct HyperIndex {
    pub month: Option<usize>,
    pub iid: Option<usize>,
    pub spatial: Option<usize>,
    pub mix: Option<usize>,
    pub year_sd: Option<usize>,
    pub year_rho: Option<usize>,
    pub names: Vec<String>,
}

/// Everything needed to serve forecasts after the fit.
pub(crate) struct LgmFit {
    pub layout: Layout,
    pub hyper_index: HyperIndex,
    pub hyper: HyperFit,
    pub fixed_features: Vec<FeatureMatrix>,
    pub offset_features: Vec<FeatureMatrix>,
    pub month_structure: Option<EffectStructure>,
    pub spatial_structure: Option<EffectStructure>,
    pub units: Vec<usize>,
    pub unit_names: Vec<String>,
    pub t_end: usize,
    /// Calendar of the extended timeline the features live on.
    pub months: Vec<YearMonth>,
    pub year_index: Vec<usize>,
}

fn build_layout(cfg: &LgmConfig, n_years: usize) -> Layout {
    let n_units = cfg.units.len();
    let mut names = vec!["alpha".to_string()];
    let fixed_start = 1;
    for f in &cfg.fixed {
        names.push(format!("beta_{}", f.name));
    }
    let harmonics = if cfg.harmonics {
        names.push("season_sin".into());
        names.push("season_cos".into());
        Some((fixed_start + cfg.fixed.len(), fixed_start + cfg.fixed.len() + 1))
    } else {
        None
    };
    let fixed = fixed_start..names.len();
    let month_start = if cfg.month_rw {
        let start = names.len();
        for u in 0..n_units {
            for j in 0..11 {
                names.push(format!("month_u{u}_{j}"));
            }
        }
        Some(start)
    } else {
        None
    };
    let iid_start = if cfg.spatial == SpatialKind::Iid {
        let start = names.len();
        for u in 0..n_units {
            names.push(format!("district_{u}"));
        }
        Some(start)
    } else {
        None
    };
    let besag_start = if cfg.spatial == SpatialKind::Besag {
        let start = names.len();
        for j in 0..n_units - 1 {
            names.push(format!("spatial_{j}"));
        }
        Some(start)
    } else {
        None
    };
    let bym2_start = if cfg.spatial == SpatialKind::Bym2 {
        let v = names.len();
        for u in 0..n_units {
            names.push(format!("spatial_iid_{u}"));
        }
        let w = names.len();
        for j in 0..n_units - 1 {
            names.push(format!("spatial_structured_{j}"));
        }
        Some((v, w))
    } else {
        None
    };
    let (ar1_start, ar1_per_district) = match cfg.ar1 {
        Ar1Kind::None => (None, false),
        Ar1Kind::Shared => {
            let start = names.len();
            for y in 0..n_years {
                names.push(format!("year_{y}"));
            }
            (Some(start), false)
        }
        Ar1Kind::PerDistrict => {
            let start = names.len();
            for u in 0..n_units {
                for y in 0..n_years {
                    names.push(format!("year_u{u}_{y}"));
                }
            }
            (Some(start), true)
        }
    };
    Layout {
        n_cols: names.len(),
        n_units,
        n_years,
        fixed,
        harmonics,
        month_start,
        iid_start,
        besag_start,
        bym2_start,
        ar1_start,
        ar1_per_district,
        names,
    }
}

fn build_hyper_index(layout: &Layout) -> HyperIndex {
    let mut idx = HyperIndex::default();
    if layout.month_start.is_some() {
        idx.month = Some(idx.names.len());
        idx.names.push("month_sd".into());
    }
    if layout.iid_start.is_some() {
        idx.iid = Some(idx.names.len());
        idx.names.push("district_sd".into());
    }
    if layout.besag_start.is_some() {
        idx.spatial = Some(idx.names.len());
        idx.names.push("spatial_sd".into());
    }
    if layout.bym2_start.is_some() {
        idx.spatial = Some(idx.names.len());
        idx.names.push("spatial_sd".into());
        idx.mix = Some(idx.names.len());
        idx.names.push("spatial_mix".into());
    }
    if layout.ar1_start.is_some() {
        idx.year_sd = Some(idx.names.len());
        idx.names.push("year_sd".into());
        idx.year_rho = Some(idx.names.len());
        idx.names.push("year_rho".into());
    }
    idx
}

struct RowCtx<'a> {
    layout: &'a Layout,
    fixed: &'a [FeatureMatrix],
    month: Option<&'a EffectStructure>,
    spatial: Option<&'a EffectStructure>,
    months: &'a [YearMonth],
    year_index: &'a [usize],
}

impl RowCtx<'_> {
    /// Design entries for (unit slot, district, month). Returns None when a
    /// fixed feature is undefined there. The AR(1) entry is omitted for
    /// months past the training years; forecasting extends the process
    /// per sample instead.
    fn build_row(&self, slot: usize, district: usize, t: usize) -> Option<Vec<(usize, f64)>> {
        let lay = self.layout;
        let mut row = Vec::with_capacity(lay.n_cols.min(64));
        row.push((0usize, 1.0));
        for (k, f) in self.fixed.iter().enumerate() {
            let v = f.get(district, t)?;
            if v != 0.0 {
                row.push((lay.fixed.start + k, v));
            }
        }
        if let Some((sin_col, cos_col)) = lay.harmonics {
            // Reduce before the trig: the raw phase index is thousands of
            // months, where sin loses precision.
            let phase = 2.0 * std::f64::consts::PI
                * self.months[t].phase().rem_euclid(12) as f64
                / 12.0;
            row.push((sin_col, phase.sin()));
            row.push((cos_col, phase.cos()));
        }
        if let Some(m0) = lay.month_start {
            let s = self.month.expect("month structure present");
            let m_idx = (self.months[t].month - 1) as usize;
            let weights = s.basis_row(m_idx);
            for (j, &w) in weights.iter().enumerate() {
                row.push((m0 + slot * 11 + j, w));
            }
        }
        if let Some(u0) = lay.iid_start {
            row.push((u0 + slot, 1.0));
        }
        if let Some(b0) = lay.besag_start {
            let s = self.spatial.expect("spatial structure present");
            for (j, &w) in s.basis_row(slot).iter().enumerate() {
                if w != 0.0 {
                    row.push((b0 + j, w));
                }
            }
        }
        if let Some((v0, w0)) = lay.bym2_start {
            row.push((v0 + slot, 1.0));
            let s = self.spatial.expect("spatial structure present");
            for (j, &w) in s.basis_row(slot).iter().enumerate() {
                if w != 0.0 {
                    row.push((w0 + j, w));
                }
            }
        }
        if let Some(a0) = lay.ar1_start {
            let y = self.year_index[t];
            if y < lay.n_years {
                let col = if lay.ar1_per_district { a0 + slot * lay.n_years + y } else { a0 + y };
                row.push((col, 1.0));
            }
        }
        Some(row)
    }
}

fn build_penalty(
    layout: &Layout,
    idx: &HyperIndex,
    month: Option<&EffectStructure>,
    spatial: Option<&EffectStructure>,
    h: &[f64],
) -> Result<(Penalty, f64)> {
    let mut blocks = vec![PenaltyBlock::Diagonal { cols: 0..1, tau: 1.0 / 25.0 }];
    // The harmonic pair is baseline seasonal structure, not a covariate
    // effect: it stays nearly free like the intercept, so a seasonal signal
    // lands there rather than being split across correlated covariates.
    let beta_end = layout.harmonics.map_or(layout.fixed.end, |(sin_col, _)| sin_col);
    if beta_end > layout.fixed.start {
        blocks.push(PenaltyBlock::Diagonal { cols: layout.fixed.start..beta_end, tau: 1.0 });
    }
    if let Some((sin_col, _)) = layout.harmonics {
        blocks.push(PenaltyBlock::Diagonal { cols: sin_col..sin_col + 2, tau: 1.0 / 25.0 });
    }
    let mut log_hyper = 0.0;

    if let (Some(m0), Some(hi)) = (layout.month_start, idx.month) {
        let s = month.expect("month structure present");
        let sigma = h[hi].exp();
        let tau = 1.0 / (sigma * sigma);
        if !tau.is_finite() || tau <= 0.0 {
            return Err(Error::numeric("month hyper-sd out of range"));
        }
        for u in 0..layout.n_units {
            blocks.push(PenaltyBlock::Structured {
                cols: m0 + u * 11..m0 + (u + 1) * 11,
                base: Arc::clone(&s.reduced),
                base_log_det: s.log_det,
                tau,
            });
        }
        log_hyper += log_sd_half_normal_prior(h[hi]);
    }
    if let (Some(u0), Some(hi)) = (layout.iid_start, idx.iid) {
        let sigma = h[hi].exp();
        let tau = 1.0 / (sigma * sigma);
        if !tau.is_finite() || tau <= 0.0 {
            return Err(Error::numeric("district hyper-sd out of range"));
        }
        blocks.push(PenaltyBlock::Diagonal { cols: u0..u0 + layout.n_units, tau });
        log_hyper += log_sd_half_normal_prior(h[hi]);
    }
    if let Some(b0) = layout.besag_start {
        let s = spatial.expect("spatial structure present");
        let hi = idx.spatial.expect("spatial hyper present");
        let sigma = h[hi].exp();
        let tau = 1.0 / (sigma * sigma);
        if !tau.is_finite() || tau <= 0.0 {
            return Err(Error::numeric("spatial hyper-sd out of range"));
        }
        blocks.push(PenaltyBlock::Structured {
            cols: b0..b0 + layout.n_units - 1,
            base: Arc::clone(&s.reduced),
            base_log_det: s.log_det,
            tau,
        });
        log_hyper += log_sd_half_normal_prior(h[hi]);
    }
    if let Some((v0, w0)) = layout.bym2_start {
        let s = spatial.expect("spatial structure present");
        let hi = idx.spatial.expect("spatial hyper present");
        let mi = idx.mix.expect("mixing hyper present");
        let sigma = h[hi].exp();
        let mix = 1.0 / (1.0 + (-h[mi]).exp());
        let total = sigma * sigma;
        let tau_iid = 1.0 / (total * (1.0 - mix));
        let tau_str = 1.0 / (total * mix);
        if !(tau_iid.is_finite() && tau_str.is_finite() && tau_iid > 0.0 && tau_str > 0.0) {
            return Err(Error::numeric("spatial mixing hypers out of range"));
        }
        blocks.push(PenaltyBlock::Diagonal { cols: v0..v0 + layout.n_units, tau: tau_iid });
        blocks.push(PenaltyBlock::Structured {
            cols: w0..w0 + layout.n_units - 1,
            base: Arc::clone(&s.reduced),
            base_log_det: s.log_det,
            tau: tau_str,
        });
        log_hyper += log_sd_half_normal_prior(h[hi]) + proportion_log_prior(h[mi]);
    }
    if let Some(a0) = layout.ar1_start {
        let si = idx.year_sd.expect("year sd hyper present");
        let ri = idx.year_rho.expect("year rho hyper present");
        let sigma = h[si].exp();
        let rho = h[ri].tanh();
        let tau = 1.0 / (sigma * sigma);
        if !tau.is_finite() || tau <= 0.0 || !(-1.0..1.0).contains(&rho) {
            return Err(Error::numeric("year AR(1) hypers out of range"));
        }
        let base = Arc::new(ar1_precision(layout.n_years, rho)?);
        let base_log_det = ar1_log_det(layout.n_years, rho);
        if layout.ar1_per_district {
            for u in 0..layout.n_units {
                blocks.push(PenaltyBlock::Structured {
                    cols: a0 + u * layout.n_years..a0 + (u + 1) * layout.n_years,
                    base: Arc::clone(&base),
                    base_log_det,
                    tau,
                });
            }
        } else {
            blocks.push(PenaltyBlock::Structured {
                cols: a0..a0 + layout.n_years,
                base,
                base_log_det,
                tau,
            });
        }
        log_hyper += log_sd_half_normal_prior(h[si]) + correlation_log_prior(h[ri]);
    }
    Ok((Penalty::new(blocks)?, log_hyper))
}

/// Fit the assembled model on panel months `[0, t_end)`.
pub(crate) fn fit_lgm(
    panel: &PanelDataset,
    t_end: usize,
    cfg: LgmConfig,
    opts: &OuterOptions,
) -> Result<LgmFit> {
    if t_end == 0 || t_end > panel.n_months() {
        return Err(Error::invalid(format!(
            "training window end {t_end} outside panel of {} months",
            panel.n_months()
        )));
    }
    if cfg.units.is_empty() {
        return Err(Error::invalid("no districts selected for fit"));
    }
    if cfg.spatial == SpatialKind::Besag || cfg.spatial == SpatialKind::Bym2 {
        if cfg.units.len() != panel.n_districts() {
            return Err(Error::invalid("spatial smoothing needs the full district set"));
        }
        if cfg.units.len() < 2 {
            return Err(Error::invalid("spatial smoothing needs at least 2 districts"));
        }
    }

    let months: Vec<YearMonth> = {
        // Extended calendar matching the feature timeline.
        let t_len = cfg
            .fixed
            .iter()
            .chain(cfg.offsets.iter())
            .map(|f| f.n_months())
            .next()
            .unwrap_or(panel.n_months());
        let mut ms = panel.months().to_vec();
        let mut last = *ms.last().expect("panel non-empty");
        while ms.len() < t_len {
            last = last.next();
            ms.push(last);
        }
        ms
    };
    for f in cfg.fixed.iter().chain(cfg.offsets.iter()) {
        if f.n_months() != months.len() || f.n_districts() != panel.n_districts() {
            return Err(Error::invalid(format!(
                "feature {} does not match the panel timeline",
                f.name
            )));
        }
    }
    let mut year_index = Vec::with_capacity(months.len());
    let mut years: Vec<i32> = Vec::new();
    for m in &months {
        if years.last() != Some(&m.year) {
            years.push(m.year);
        }
        year_index.push(years.len() - 1);
    }
    let n_years = year_index[t_end - 1] + 1;

    let month_structure = if cfg.month_rw { Some(cyclic_rw1(12)?) } else { None };
    let spatial_structure = match cfg.spatial {
        SpatialKind::Besag | SpatialKind::Bym2 => Some(besag(panel.adjacency())?),
        _ => None,
    };

    let layout = build_layout(&cfg, n_years);
    let hyper_index = build_hyper_index(&layout);

    let ctx = RowCtx {
        layout: &layout,
        fixed: &cfg.fixed,
        month: month_structure.as_ref(),
        spatial: spatial_structure.as_ref(),
        months: &months,
        year_index: &year_index,
    };

    let mut design = Design::new(layout.names.len());
    'obs: for t in 0..t_end {
        for (slot, &i) in cfg.units.iter().enumerate() {
            let mut offset = panel.population(i, t).ln();
            for f in &cfg.offsets {
                match f.get(i, t) {
                    Some(v) => offset += v,
                    None => continue 'obs,
                }
            }
            if let Some(row) = ctx.build_row(slot, i, t) {
                design.push_row(row, f64::from(panel.cases(i, t)), offset, (i, t));
            }
        }
    }
    if design.n_obs() == 0 {
        return Err(Error::invalid(
            "training window too short for the requested lags: no usable observations",
        ));
    }

    // Start the intercept at the average observed rate over the offsets.
    let mut x0 = vec![0.0; layout.n_cols];
    let total_y: f64 = design.y.iter().sum();
    let total_exposure: f64 = design.offset.iter().map(|o| o.exp()).sum();
    x0[0] = ((total_y + 0.5) / total_exposure).ln();

    let hyper0: Vec<f64> = hyper_index
        .names
        .iter()
        .map(|n| match n.as_str() {
            "year_rho" => 0.5f64.atanh(),
            "spatial_mix" => 0.0,
            _ => 0.5f64.ln(),
        })
        .collect();

    let rebuild = |h: &[f64]| {
        build_penalty(&layout, &hyper_index, month_structure.as_ref(), spatial_structure.as_ref(), h)
    };
    let hyper = maximize_laplace_marginal(&design, x0, hyper0, rebuild, opts)?;

    let unit_names = cfg.units.iter().map(|&i| panel.districts()[i].clone()).collect();
    Ok(LgmFit {
        layout,
        hyper_index,
        hyper,
        fixed_features: cfg.fixed,
        offset_features: cfg.offsets,
        month_structure,
        spatial_structure,
        units: cfg.units,
        unit_names,
        t_end,
        months,
        year_index,
    })
}

impl LgmFit {
    pub fn origin(&self) -> YearMonth {
        self.months[self.t_end - 1]
    }

    /// Hyperparameters on their natural scale.
    pub fn hypers_natural(&self) -> BTreeMap<String, f64> {
        self.hyper_index
            .names
            .iter()
            .zip(&self.hyper.hypers)
            .map(|(name, &v)| {
                let nat = match name.as_str() {
                    "year_rho" => v.tanh(),
                    "spatial_mix" => 1.0 / (1.0 + (-v).exp()),
                    _ => v.exp(),
                };
                (name.clone(), nat)
            })
            .collect()
    }

    fn row_ctx(&self) -> RowCtx<'_> {
        RowCtx {
            layout: &self.layout,
            fixed: &self.fixed_features,
            month: self.month_structure.as_ref(),
            spatial: self.spatial_structure.as_ref(),
            months: &self.months,
            year_index: &self.year_index,
        }
    }

    /// Fitted mean count at a training cell, at the posterior mode.
    pub fn mean_at(&self, panel: &PanelDataset, slot: usize, t: usize) -> Result<f64> {
        let i = self.units[slot];
        let ctx = self.row_ctx();
        let row = ctx
            .build_row(slot, i, t)
            .ok_or_else(|| Error::missing(format!("features undefined at district {i}, t {t}")))?;
        let mut eta = panel.population(i, t).ln();
        for f in &self.offset_features {
            eta += f
                .get(i, t)
                .ok_or_else(|| Error::missing(format!("{} undefined at district {i}, t {t}", f.name)))?;
        }
        for &(c, v) in &row {
            eta += v * self.hyper.fit.mode[c];
        }
        Ok(eta.exp())
    }

    /// Predictive count samples for every unit at the requested horizons.
    /// Parameter draws are shared across units and horizons within this call;
    /// observation noise uses an independent stream per (district, horizon).
    pub fn forecast_all(
        &self,
        panel: &PanelDataset,
        horizons: &[u8],
        n_samples: usize,
        seed: u64,
        model_tag: u64,
    ) -> Result<Vec<ForecastDistribution>> {
        if n_samples == 0 {
            return Err(Error::invalid("n_samples must be positive"));
        }
        let origin_t = self.t_end - 1;
        let origin = self.months[origin_t];
        let lay = &self.layout;

        for &h in horizons {
            if h == 0 {
                return Err(Error::invalid("horizon must be at least 1"));
            }
            let t_star = origin_t + h as usize;
            if t_star >= self.months.len() {
                return Err(Error::invalid(format!(
                    "horizon {h} reaches past the prepared forecast timeline"
                )));
            }
            for f in self.fixed_features.iter().chain(self.offset_features.iter()) {
                if f.min_source_lag < h as usize {
                    return Err(Error::invalid(format!(
                        "feature {} has source lag {} < horizon {h}: it would read observations after the origin",
                        f.name, f.min_source_lag
                    )));
                }
                for &i in &self.units {
                    if !f.is_defined(i, t_star) {
                        return Err(Error::missing(format!(
                            "{} undefined at district {}, {}",
                            f.name,
                            panel.districts()[i],
                            self.months[t_star]
                        )));
                    }
                }
            }
        }
        // The extension depth comes from the prepared timeline, not the
        // requested horizons, so the parameter stream layout is identical no
        // matter which subset a caller asks for.
        let max_steps = if lay.ar1_start.is_some() {
            let last = self.months.len() - 1;
            (self.year_index[last] + 1).saturating_sub(lay.n_years)
        } else {
            0
        };

        let ordinal = origin.ordinal() as u64;
        let mut param_rng = stream_rng(seed, &[hash_tag("forecast-params"), model_tag, ordinal]);
        let draws: Vec<Vec<f64>> =
            (0..n_samples).map(|_| self.hyper.fit.approx.sample(&mut param_rng)).collect();

        // AR(1) extension beyond the training years, one path per sample
        // (per unit when the effect is per-district), hypers at their modes.
        let n_paths = if lay.ar1_per_district { lay.n_units } else { 1 };
        let mut ar1_ext: Vec<Vec<f64>> = Vec::new();
        if max_steps > 0 {
            let nat = self.hypers_natural();
            let sd = nat["year_sd"];
            let rho = nat["year_rho"];
            let innovation_sd = sd * (1.0 - rho * rho).sqrt();
            let a0 = lay.ar1_start.expect("ar1 present");
            ar1_ext.reserve(n_samples);
            for draw in &draws {
                let mut per_sample = Vec::with_capacity(n_paths * max_steps);
                for path in 0..n_paths {
                    let last_col = if lay.ar1_per_district {
                        a0 + path * lay.n_years + lay.n_years - 1
                    } else {
                        a0 + lay.n_years - 1
                    };
                    let mut prev = draw[last_col];
                    for _ in 0..max_steps {
                        let z: f64 = StandardNormal.sample(&mut param_rng);
                        prev = rho * prev + innovation_sd * z;
                        per_sample.push(prev);
                    }
                }
                ar1_ext.push(per_sample);
            }
        }

        let ctx = self.row_ctx();
        let mut out = Vec::with_capacity(lay.n_units * horizons.len());
        for (slot, &i) in self.units.iter().enumerate() {
            for &h in horizons {
                let t_star = origin_t + h as usize;
                let target_ym = self.months[t_star];
                let row = ctx.build_row(slot, i, t_star).ok_or_else(|| {
                    Error::missing(format!(
                        "features undefined at district {}, {}",
                        panel.districts()[i],
                        target_ym
                    ))
                })?;
                let mut offset = panel.population_at(i, target_ym).ln();
                for f in &self.offset_features {
                    offset += f.get(i, t_star).expect("checked above");
                }
                let steps = if lay.ar1_start.is_some() {
                    (self.year_index[t_star] + 1).saturating_sub(lay.n_years)
                } else {
                    0
                };

                let mut obs_rng = stream_rng(
                    seed,
                    &[hash_tag("forecast-obs"), model_tag, ordinal, i as u64, u64::from(h)],
                );
                let mut samples = Vec::with_capacity(n_samples);
                for (s, draw) in draws.iter().enumerate() {
                    let mut eta = offset;
                    for &(c, v) in &row {
                        eta += v * draw[c];
                    }
                    if steps > 0 {
                        let path = if lay.ar1_per_district { slot } else { 0 };
                        eta += ar1_ext[s][path * max_steps + steps - 1];
                    }
                    let mu = eta.min(MAX_LOG_MEAN).exp();
                    let y = Poisson::new(mu)
                        .map_err(|_| Error::numeric("non-finite predictive mean"))?
                        .sample(&mut obs_rng);
                    samples.push(y.round());
                }
                out.push(ForecastDistribution {
                    district: self.unit_names[slot].clone(),
                    origin,
                    horizon: h,
                    samples,
                });
            }
        }
        Ok(out)
    }

    /// Values of the fitted effect vector for a structured block, expanded to
    /// the constrained scale.
    pub fn expanded_month_effects(&self) -> Option<Vec<Vec<f64>>> {
        let m0 = self.layout.month_start?;
        let s = self.month_structure.as_ref()?;
        let mode = &self.hyper.fit.mode;
        Some(
            (0..self.layout.n_units)
                .map(|u| s.expand(&mode[m0 + u * 11..m0 + (u + 1) * 11]))
                .collect(),
        )
    }

    /// Per-district spatial effect on the constrained scale (iid, Besag, or
    /// combined BYM2), when the model has one.
    pub fn district_effects(&self) -> Option<Vec<f64>> {
        let mode = &self.hyper.fit.mode;
        if let Some(u0) = self.layout.iid_start {
            return Some(mode[u0..u0 + self.layout.n_units].to_vec());
        }
        if let Some(b0) = self.layout.besag_start {
            let s = self.spatial_structure.as_ref()?;
            return Some(s.expand(&mode[b0..b0 + self.layout.n_units - 1]));
        }
        if let Some((v0, w0)) = self.layout.bym2_start {
            let s = self.spatial_structure.as_ref()?;
            let structured = s.expand(&mode[w0..w0 + self.layout.n_units - 1]);
            return Some(
                (0..self.layout.n_units).map(|u| mode[v0 + u] + structured[u]).collect(),
            );
        }
        None
    }

    /// Fitted AR(1) year effects (shared: one row; per-district: one per unit).
    pub fn year_effects(&self) -> Option<Vec<Vec<f64>>> {
        let a0 = self.layout.ar1_start?;
        let mode = &self.hyper.fit.mode;
        let ny = self.layout.n_years;
        if self.layout.ar1_per_district {
            Some((0..self.layout.n_units).map(|u| mode[a0 + u * ny..a0 + (u + 1) * ny].to_vec()).collect())
        } else {
            Some(vec![mode[a0..a0 + ny].to_vec()])
        }
    }

    pub fn fixed_coefficients(&self) -> BTreeMap<String, f64> {
        let mode = &self.hyper.fit.mode;
        self.layout
            .fixed
            .clone()
            .map(|c| (self.layout.names[c].clone(), mode[c]))
            .collect()
    }

    pub fn alpha(&self) -> f64 {
        self.hyper.fit.mode[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::testsupport::toy_parts;

    fn constant_panel(n: usize, t_len: usize) -> PanelDataset {
        toy_parts(n, t_len).build().unwrap()
    }

    #[test]
    fn layout_counts_columns_for_full_structure() {
        let cfg = LgmConfig {
            fixed: Vec::new(),
            offsets: Vec::new(),
            month_rw: true,
            harmonics: false,
            spatial: SpatialKind::Bym2,
            ar1: Ar1Kind::Shared,
            units: (0..4).collect(),
        };
        let lay = build_layout(&cfg, 5);
        // 1 + 4*11 + 4 + 3 + 5
        assert_eq!(lay.n_cols, 1 + 44 + 4 + 3 + 5);
        assert_eq!(lay.names.len(), lay.n_cols);
        let idx = build_hyper_index(&lay);
        assert_eq!(idx.names, ["month_sd", "spatial_sd", "spatial_mix", "year_sd", "year_rho"]);
    }

    #[test]
    fn constant_panel_predicts_the_constant() {
        // Cases are 5 everywhere: the intercept-plus-effects fit should put
        // its predictive mean near 5, and forecasting must be deterministic
        // in the seed.
        let panel = constant_panel(3, 48);
        let cfg = LgmConfig {
            fixed: Vec::new(),
            offsets: Vec::new(),
            month_rw: true,
            harmonics: false,
            spatial: SpatialKind::Iid,
            ar1: Ar1Kind::None,
            units: vec![0, 1, 2],
        };
        let fit = fit_lgm(&panel, 45, cfg, &OuterOptions::default()).unwrap();
        assert!(fit.hyper.fit.converged);
        let mean = fit.mean_at(&panel, 0, 10).unwrap();
        assert!((mean - 5.0).abs() / 5.0 < 0.02, "fitted mean {mean} not near 5");

        let f1 = fit.forecast_all(&panel, &[1, 2, 3], 400, 9, 7).unwrap();
        let f2 = fit.forecast_all(&panel, &[1, 2, 3], 400, 9, 7).unwrap();
        assert_eq!(f1.len(), 9);
        for (a, b) in f1.iter().zip(&f2) {
            assert_eq!(a.samples, b.samples);
            assert_eq!(a.origin, panel.month_at(44));
        }
        let m: f64 = f1[0].samples.iter().sum::<f64>() / 400.0;
        assert!((m - 5.0).abs() < 0.6, "forecast mean {m} far from 5");
    }

    #[test]
    fn ar1_year_extension_widens_new_year_forecasts() {
        // Years carry real level shifts, so the fitted yearly sd is material.
        // A horizon inside the training years only sees posterior and Poisson
        // noise; one that crosses into the next calendar year also draws the
        // AR(1) innovation and must come out wider.
        let year_effect: [f64; 5] = [-0.5, -0.2, 0.3, 0.1, 0.55];
        let mut parts = toy_parts(2, 60);
        let mut rng = stream_rng(77, &[5]);
        for i in 0..2 {
            for t in 0..60 {
                let rate = 8.0 * year_effect[t / 12].exp();
                parts.cases[i * 60 + t] = Poisson::new(rate).unwrap().sample(&mut rng) as i64;
            }
        }
        let panel = parts.build().unwrap().extended(2);
        let cfg = LgmConfig {
            fixed: Vec::new(),
            offsets: Vec::new(),
            month_rw: false,
            harmonics: false,
            spatial: SpatialKind::Iid,
            ar1: Ar1Kind::Shared,
            units: vec![0, 1],
        };
        // Origin November 2014: horizon 1 stays in 2014, horizon 2 does not.
        let fit = fit_lgm(&panel, 59, cfg.clone(), &OuterOptions::default()).unwrap();
        let fc = fit.forecast_all(&panel, &[1, 2], 800, 3, 11).unwrap();
        assert_eq!(fc[0].origin, YearMonth::new(2014, 11).unwrap());
        let spread = |samples: &[f64]| {
            let m = samples.iter().sum::<f64>() / samples.len() as f64;
            samples.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / samples.len() as f64
        };
        let d0_h1 = fc.iter().find(|d| d.district == "d00" && d.horizon == 1).unwrap();
        let d0_h2 = fc.iter().find(|d| d.district == "d00" && d.horizon == 2).unwrap();
        let (v1, v2) = (spread(&d0_h1.samples), spread(&d0_h2.samples));
        assert!(v2 > 1.15 * v1, "variance did not widen across the year break: {v1} vs {v2}");

        // December origin: the very first horizon needs the extension.
        let fit = fit_lgm(&panel, 60, cfg, &OuterOptions::default()).unwrap();
        let fc = fit.forecast_all(&panel, &[1], 500, 3, 11).unwrap();
        assert_eq!(fc[0].origin, YearMonth::new(2014, 12).unwrap());
        let mean: f64 = fc[0].samples.iter().sum::<f64>() / 500.0;
        assert!(mean > 4.0 && mean < 40.0, "mean {mean} implausible");
    }

    #[test]
    fn undefined_feature_at_target_is_reported() {
        let panel = constant_panel(2, 30);
        let mut f = FeatureMatrix::new("broken", 2, 33, 3);
        for i in 0..2 {
            for t in 0..30 {
                f.set(i, t, 0.1);
            }
        }
        // Forecast months 30..32 left undefined.
        let cfg = LgmConfig {
            fixed: vec![f],
            offsets: Vec::new(),
            month_rw: false,
            harmonics: false,
            spatial: SpatialKind::Iid,
            ar1: Ar1Kind::None,
            units: vec![0, 1],
        };
        let fit = fit_lgm(&panel, 30, cfg, &OuterOptions::default()).unwrap();
        let err = fit.forecast_all(&panel, &[1], 100, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("broken") && msg.contains("d00"), "unexpected error: {msg}");
    }

    #[test]
    fn leakage_guard_rejects_short_lag_features() {
        let panel = constant_panel(2, 30);
        let mut f = FeatureMatrix::new("lag1", 2, 33, 1);
        for i in 0..2 {
            for t in 1..33 {
                f.set(i, t, 0.1);
            }
        }
        let cfg = LgmConfig {
            fixed: vec![f],
            offsets: Vec::new(),
            month_rw: false,
            harmonics: false,
            spatial: SpatialKind::Iid,
            ar1: Ar1Kind::None,
            units: vec![0, 1],
        };
        let fit = fit_lgm(&panel, 30, cfg, &OuterOptions::default()).unwrap();
        assert!(fit.forecast_all(&panel, &[1], 100, 1, 1).is_ok());
        let err = fit.forecast_all(&panel, &[3], 100, 1, 1).unwrap_err();
        assert!(err.to_string().contains("source lag"), "got: {err}");
    }
}
