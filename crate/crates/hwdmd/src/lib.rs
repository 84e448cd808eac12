//! Reduced-order forecasting of origin-destination flow matrices.
//!
//! The crate fits a high-order weighted linear model on vectorized OD
//! snapshots with boarding counts as auxiliary regressors, stores it in a
//! compact subspace form, updates it day by day in constant memory, and
//! forecasts multiple steps ahead by rolling substitution. Supporting
//! pieces: trip ingestion, exact dynamic mode decomposition, evaluation
//! metrics and baselines, hyperparameter search, synthetic data, and a CLI.

pub mod cli;
pub mod error;
pub mod estimator;
pub mod eval;
pub mod exact_dmd;
pub mod io;
pub mod linalg;
pub mod online;
pub mod par;
pub mod regression;
pub mod snapshot;
pub mod synth;

pub use error::{Error, ErrorCategory, Result};
pub use estimator::{fit, forecast, ForecastBlock, HwDmdHyper, HwDmdModel};
pub use eval::{metrics, EvalSlice, MetricReport};
pub use online::{daily_update, UpdateOptions};
pub use regression::LagSpec;
pub use snapshot::{Calendar, SnapshotSeries};
