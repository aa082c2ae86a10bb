use std::path::Path;

use anyhow::{Context, Result};
use chronident_core::model::EnsembleConfig;
use chronident_core::{ClockParams, EnsembleParams, Method};
use serde::{Deserialize, Serialize};

/// Estimation settings that may be stored next to the ensemble.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationOptions {
    pub method: Option<Method>,
    pub ell: Option<usize>,
    pub m_max: Option<usize>,
    #[serde(rename = "L")]
    pub l: Option<usize>,
    pub ts_target_s: Option<f64>,
    pub d1: Option<f64>,
    pub outlier_k: Option<f64>,
}

/// Ensemble file plus the optional simulation and estimation settings.
///
/// A plain ensemble file (`ts_seconds`, `clocks`, `r_upper`) is a valid scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub ts_seconds: f64,
    pub clocks: Vec<ClockParams>,
    pub r_upper: Vec<f64>,
    #[serde(default)]
    pub n_steps: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub estimation: EstimationOptions,
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        let cfg: ScenarioConfig =
            serde_json::from_str(&text).with_context(|| format!("invalid scenario file {}", path.display()))?;
        Ok(cfg)
    }

    pub fn params(&self) -> chronident_core::Result<EnsembleParams> {
        EnsembleConfig {
            ts_seconds: self.ts_seconds,
            clocks: self.clocks.clone(),
            r_upper: self.r_upper.clone(),
        }
        .params()
    }
}
