use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{ClockParams, EnsembleParams, ThetaVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Acov,
    Mdm,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Acov => "acov",
            Method::Mdm => "mdm",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "acov" => Ok(Method::Acov),
            "mdm" => Ok(Method::Mdm),
            other => Err(format!("unknown method `{other}` (expected acov or mdm)")),
        }
    }
}

/// Solver diagnostics attached to every estimate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Residual norm of the final linear solve (weighted for ACOV).
    pub residual: f64,
    /// Condition number of the scaled design matrix; `None` when singular.
    pub cond: Option<f64>,
    pub rank: usize,
    pub rank_deficient: bool,
    /// Labels of parameters whose negative estimates were clamped to a small positive floor.
    pub clamped: Vec<String>,
    /// Drift products were indistinguishable from zero; drifts reported equal to the pivot's.
    #[serde(default)]
    pub drift_degenerate: bool,
    /// Approximate standard errors aligned with `theta`.
    pub std_errors: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub null_directions: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outliers_removed: Option<usize>,
    #[serde(rename = "L", default, skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ts_target_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_residue_dim: Option<usize>,
}

/// Identified parameters of one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub method: Method,
    pub clocks: Vec<ClockParams>,
    /// Row-major upper triangle of `R`.
    pub r_upper: Vec<f64>,
    /// Full parameter vector `[q1.., q2.., d.., r_upper]`.
    pub theta: Vec<f64>,
    pub theta_labels: Vec<String>,
    pub diagnostics: Diagnostics,
}

impl EstimateReport {
    pub(crate) fn assemble(
        method: Method,
        clocks: Vec<ClockParams>,
        r_upper: Vec<f64>,
        diagnostics: Diagnostics,
    ) -> Self {
        let n = clocks.len();
        let mut theta = Vec::with_capacity(ThetaVector::len_for(n));
        theta.extend(clocks.iter().map(|c| c.q1));
        theta.extend(clocks.iter().map(|c| c.q2));
        theta.extend(clocks.iter().map(|c| c.d));
        theta.extend(r_upper.iter().copied());
        EstimateReport {
            method,
            theta_labels: ThetaVector::labels(n),
            clocks,
            r_upper,
            theta,
            diagnostics,
        }
    }

    pub fn n_clocks(&self) -> usize {
        self.clocks.len()
    }

    /// Validated parameter set; fails if the estimated `R` is not positive semi-definite.
    pub fn params(&self) -> Result<EnsembleParams> {
        EnsembleParams::from_r_upper(self.clocks.clone(), &self.r_upper)
    }
}
