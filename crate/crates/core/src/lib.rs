//! Factor-based forecasting of large daily realized covariance panels.
//!
//! The library decomposes each day's covariance matrix into a small factor
//! covariance, factor loadings, and a sector-blocked residual, fits
//! heterogeneous-lag autoregressions with LASSO / adaptive-LASSO shrinkage to
//! the factor dynamics, and reassembles one-day-ahead covariance forecasts.
//! Around that core it provides benchmark forecasters (random walk, blocked
//! random walk, exponentially weighted moving average), forecast evaluation,
//! minimum-variance portfolio construction with box/short-sale constraints,
//! long-memory diagnostics, and a synthetic data generator for end-to-end
//! testing.
//!
//! The `covcast` binary exposes the same pipeline as subcommands; see the
//! repository README for file formats and CLI usage.

pub mod config;
pub mod diagnostics;
pub mod error;
pub mod evaluate;
pub mod factor;
pub mod forecast;
pub mod har;
pub mod panel;
pub mod portfolio;
pub mod qp;
pub mod synth;
pub mod transforms;

pub use error::{Error, Result};
pub use panel::{CleanReport, CovPanel, ReturnsPanel};

// Dates appear throughout the public API; re-export the crate behind them
// so downstream code can name the same version.
pub use chrono;
