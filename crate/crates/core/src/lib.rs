//! District-level probabilistic forecasting for monthly epidemic surveillance
//! panels.
//!
//! The crate fits three spatiotemporal count-model families plus a seasonal
//! reference model to a district-by-month case panel, combines them into a
//! weighted sample ensemble, scores forecasts with proper scoring rules, and
//! classifies outbreak months under four threshold definitions. Numeric
//! kernels are generic over the scalar type ([`num::Scalar`]); the pipeline
//! itself runs in f64.

pub mod calendar;
pub mod ensemble;
pub mod error;
pub mod linalg;
pub mod models;
pub mod num;
pub mod opt;
pub mod panel;
pub mod quantile;
pub mod scoring;
pub mod synth;
pub mod thresholds;
pub mod tscv;
pub mod weather;

pub use error::{Error, Result};

/// Pipeline scalar. The kernels are generic; the data pipeline is f64.
pub type Real = f64;

/// f64 dense matrix, the concrete instantiation used by the pipeline.
pub type Matrix = linalg::DMat<Real>;

pub use calendar::YearMonth;
pub use models::{FittedModel, ForecastDistribution, ModelFamily, ModelSpec};
pub use panel::{AdjacencyGraph, FeatureMatrix, PanelDataset};
pub use scoring::ScoreTable;
pub use thresholds::{OutbreakLabel, OutbreakRule, OutbreakRuleResult};
pub use weather::Variogram;
