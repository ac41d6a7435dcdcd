//! Run configuration: defaults, TOML overrides, and deterministic manifests
//! describing what a command read, wrote, and was configured with.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::har::FitMethod;
use crate::portfolio::ConstraintKind;

/// All tunables understood by the command-line front end, with defaults
/// matching the documented pipeline. A TOML file may override any subset;
/// command-line flags override the file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // Shared.
    pub seed: u64,
    /// Worker threads; zero keeps the library default.
    pub threads: usize,

    // Synthetic generation.
    pub n_assets: usize,
    pub n_factors: usize,
    pub n_sectors: usize,
    pub n_days: usize,
    pub persistence_day: f64,
    pub persistence_week: f64,
    pub persistence_month: f64,
    pub beta_d: f64,
    pub block_strength: f64,
    pub noise_scale: f64,

    // Outlier cleaning.
    pub sd_threshold: f64,
    pub flag_fraction: f64,
    pub replace_count: usize,

    // Forecasting model.
    pub window: usize,
    pub estimator: String,
    pub log_matrix: bool,
    pub har_day: usize,
    pub har_week: usize,
    pub har_month: usize,
    pub psd_floor_scale: f64,
    pub ewma_lambda: f64,

    // Portfolio backtest.
    pub constraints: String,
    pub rebalance_fraction: f64,
    pub annualization: f64,

    // Diagnostics.
    pub k_max: usize,
    pub bandwidth: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            threads: 0,
            n_assets: 30,
            n_factors: 3,
            n_sectors: 3,
            n_days: 600,
            persistence_day: 0.35,
            persistence_week: 0.30,
            persistence_month: 0.25,
            beta_d: 0.4,
            block_strength: 0.3,
            noise_scale: 1.0,
            sd_threshold: 4.0,
            flag_fraction: 0.25,
            replace_count: 10,
            window: 252,
            estimator: "adalasso".into(),
            log_matrix: true,
            har_day: 1,
            har_week: 5,
            har_month: 22,
            psd_floor_scale: 1e-8,
            ewma_lambda: 0.96,
            constraints: "restricted".into(),
            rebalance_fraction: 1.0,
            annualization: 252.0,
            k_max: 10,
            // Zero means the default floor(sqrt(T)) bandwidth.
            bandwidth: 0,
        }
    }
}

impl RunConfig {
    /// Defaults overridden by the TOML file at `path`.
    pub fn from_toml_file(path: &Path) -> Result<RunConfig> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: e.to_string(),
        })
    }

    /// Parses the `estimator` key.
    pub fn fit_method(&self) -> Result<FitMethod> {
        match self.estimator.as_str() {
            "lasso" => Ok(FitMethod::Lasso),
            "adalasso" => Ok(FitMethod::AdaLasso),
            "ols" => Ok(FitMethod::Ols),
            other => Err(Error::Validation(format!(
                "unknown estimator '{other}' (expected lasso, adalasso, or ols)"
            ))),
        }
    }

    /// Parses the `constraints` key.
    pub fn constraint_kind(&self) -> Result<ConstraintKind> {
        match self.constraints.as_str() {
            "global" => Ok(ConstraintKind::Global),
            "restricted" => Ok(ConstraintKind::Restricted),
            "long-only" => Ok(ConstraintKind::LongOnly),
            other => Err(Error::Validation(format!(
                "unknown constraint set '{other}' (expected global, restricted, or long-only)"
            ))),
        }
    }

    pub fn har_spans(&self) -> (usize, usize, usize) {
        (self.har_day, self.har_week, self.har_month)
    }

    pub fn persistence(&self) -> (f64, f64, f64) {
        (
            self.persistence_day,
            self.persistence_week,
            self.persistence_month,
        )
    }

    /// Stable hash of the fully resolved configuration.
    pub fn digest(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        let out = hasher.finalize();
        let mut hex = String::with_capacity(64);
        for byte in out {
            hex.push_str(&format!("{byte:02x}"));
        }
        hex
    }
}

/// What a command did, written next to its outputs. Contains no timestamps
/// so identical runs produce identical manifests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_digest: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// Command-specific counters (days, assets, repairs, ...), ordered by
    /// key for stable serialization.
    pub counts: BTreeMap<String, i64>,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        RunManifest {
            command: command.to_string(),
            config_digest: config.digest(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            counts: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> &mut Self {
        self.inputs.push(path.display().to_string());
        self
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.display().to_string());
        self
    }

    pub fn count(&mut self, key: &str, value: i64) -> &mut Self {
        self.counts.insert(key.to_string(), value);
        self
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Validation(format!("manifest serialization failed: {e}")))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path.display().to_string(), e))
    }
}
