//! Allan (co)variance: empirical overlapping estimates from measurement
//! channels, closed forms from model parameters, and estimator variances.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::EnsembleParams;
use crate::simulate::MeasurementRecord;

/// Lower bound on [`acov_variance`] so every regression weight stays finite.
pub const VAR_FLOOR: f64 = 1.491_668_146_240_041_3e-154; // sqrt(f64::MIN_POSITIVE)

/// Averaging factors `m` and their times `tau = m * Ts`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauGrid {
    m_values: Vec<usize>,
    ts: f64,
    /// Set when fewer distinct factors than requested could be placed.
    pub truncated: bool,
}

impl TauGrid {
    pub fn new(m_values: Vec<usize>, ts: f64) -> Result<Self> {
        if !(ts.is_finite() && ts > 0.0) {
            return invalid(format!("sampling period must be positive, got {ts}"));
        }
        if m_values.is_empty() {
            return invalid("empty averaging grid");
        }
        if m_values[0] == 0 || m_values.windows(2).any(|w| w[1] <= w[0]) {
            return invalid("averaging factors must be positive and strictly increasing");
        }
        Ok(TauGrid {
            m_values,
            ts,
            truncated: false,
        })
    }

    pub fn m_values(&self) -> &[usize] {
        &self.m_values
    }

    pub fn ts(&self) -> f64 {
        self.ts
    }

    pub fn taus(&self) -> Vec<f64> {
        self.m_values.iter().map(|&m| m as f64 * self.ts).collect()
    }

    pub fn len(&self) -> usize {
        self.m_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m_values.is_empty()
    }

    pub fn max_m(&self) -> usize {
        *self.m_values.last().expect("grid is non-empty")
    }
}

/// `ell` factors evenly spaced in log between 1 and `m_max`, rounded and deduplicated.
pub fn log_spaced_grid(ell: usize, m_max: usize, ts: f64) -> Result<TauGrid> {
    if ell < 2 {
        return invalid(format!("need at least 2 averaging times, got {ell}"));
    }
    if m_max < 1 {
        return invalid("m_max must be at least 1");
    }
    let top = (m_max as f64).ln();
    let mut m: Vec<usize> = (0..ell)
        .map(|p| {
            let v = (top * p as f64 / (ell - 1) as f64).exp().round() as usize;
            v.clamp(1, m_max)
        })
        .collect();
    m.dedup();
    let truncated = m.len() < ell;
    if truncated {
        log::warn!(
            "log-spaced grid: only {} distinct factors up to {m_max} (asked for {ell})",
            m.len()
        );
    }
    let mut grid = TauGrid::new(m, ts)?;
    grid.truncated = truncated;
    Ok(grid)
}

/// Channel pairs in regression order: `(0,0)..(nz-1,nz-1)` then `(0,1),(0,2),..,(nz-2,nz-1)`.
pub fn acov_pairs(nz: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<_> = (0..nz).map(|i| (i, i)).collect();
    out.extend((0..nz).flat_map(|i| (i + 1..nz).map(move |j| (i, j))));
    out
}

fn check_lag(record: &MeasurementRecord, m: usize) -> Result<()> {
    let n = record.n_steps();
    if m < 1 || m > n / 2 {
        return invalid(format!("averaging factor {m} outside 1..={} for N = {n}", n / 2));
    }
    Ok(())
}

/// Overlapping estimates for all `pairs` at factor `m` in one pass over the record.
fn acov_pass(record: &MeasurementRecord, pairs: &[(usize, usize)], m: usize) -> Vec<f64> {
    let nz = record.nz();
    let z = record.z().as_slice();
    let count = record.n_steps() - 2 * m + 1;
    let mut d = vec![0.0; nz];
    let mut sums = vec![0.0; pairs.len()];
    for k in 0..count {
        let a = k * nz;
        let b = (k + m) * nz;
        let c = (k + 2 * m) * nz;
        for (ch, dv) in d.iter_mut().enumerate() {
            *dv = z[c + ch] - 2.0 * z[b + ch] + z[a + ch];
        }
        for (s, &(i, j)) in sums.iter_mut().zip(pairs) {
            *s += d[i] * d[j];
        }
    }
    let tau = m as f64 * record.ts();
    let norm = 2.0 * tau * tau * count as f64;
    sums.into_iter().map(|s| s / norm).collect()
}

/// Overlapping Allan covariance of channels `i`, `j` (0-based) at `tau = m Ts`.
pub fn empirical_acov(record: &MeasurementRecord, i: usize, j: usize, m: usize) -> Result<f64> {
    if i >= record.nz() || j >= record.nz() {
        return invalid(format!("channel out of range for {} channels", record.nz()));
    }
    check_lag(record, m)?;
    // order the pair so (i, j) and (j, i) run the identical arithmetic
    let pair = (i.min(j), i.max(j));
    Ok(acov_pass(record, &[pair], m)[0])
}

/// Closed-form Allan covariance of channels `i`, `j` (0-based) at `tau`.
///
/// Off-diagonal entries carry only the pivot's noise; diagonal entries add
/// the non-pivot clock's own noise.
pub fn analytic_acov(params: &EnsembleParams, i: usize, j: usize, tau: f64) -> f64 {
    let c = params.clocks();
    let pivot = &c[0];
    let r = params.r()[(i, j)];
    let drift = params.relative_drift(i) * params.relative_drift(j) * tau * tau / 2.0;
    let (q1, q2) = if i == j {
        (pivot.q1 + c[i + 1].q1, pivot.q2 + c[i + 1].q2)
    } else {
        (pivot.q1, pivot.q2)
    };
    q1 / tau + q2 * tau / 3.0 + 3.0 * r / (tau * tau) + drift
}

/// Approximate variance `2 |sigma2| / nu` of an ACOV estimate with `nu = N / m`.
///
/// The magnitude keeps cross terms with negative estimates usable as weights;
/// the result never drops below [`VAR_FLOOR`].
pub fn acov_variance(sigma2: f64, n_steps: usize, m: usize) -> f64 {
    let nu = n_steps as f64 / m as f64;
    (2.0 * sigma2.abs() / nu).max(VAR_FLOOR)
}

/// Empirical Allan (co)variances of every channel pair over a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcovEstimate {
    pub grid: TauGrid,
    pub nz: usize,
    pub n_steps: usize,
    /// Pairs in [`acov_pairs`] order.
    pub pairs: Vec<(usize, usize)>,
    /// `sigma2[pair][p]`.
    pub sigma2: Vec<Vec<f64>>,
    /// Estimator variances aligned with `sigma2`.
    pub var_weights: Vec<Vec<f64>>,
}

impl AcovEstimate {
    pub fn pair_index(&self, i: usize, j: usize) -> Option<usize> {
        let key = (i.min(j), i.max(j));
        self.pairs.iter().position(|&p| p == key)
    }

    pub fn get(&self, i: usize, j: usize, p: usize) -> Option<f64> {
        self.pair_index(i, j).map(|k| self.sigma2[k][p])
    }

    pub fn value_count(&self) -> usize {
        self.pairs.len() * self.grid.len()
    }
}

/// Estimates every channel pair at every grid point.
pub fn acov_grid(record: &MeasurementRecord, grid: &TauGrid) -> Result<AcovEstimate> {
    if (grid.ts() - record.ts()).abs() > 1e-12 * record.ts() {
        return invalid(format!(
            "grid period {} differs from record period {}",
            grid.ts(),
            record.ts()
        ));
    }
    check_lag(record, grid.max_m())?;
    let nz = record.nz();
    let n = record.n_steps();
    let pairs = acov_pairs(nz);
    let by_m: Vec<Vec<f64>> = grid
        .m_values()
        .par_iter()
        .map(|&m| acov_pass(record, &pairs, m))
        .collect();
    let sigma2: Vec<Vec<f64>> = (0..pairs.len()).map(|k| by_m.iter().map(|v| v[k]).collect()).collect();
    let var_weights = sigma2
        .iter()
        .map(|row| {
            row.iter()
                .zip(grid.m_values())
                .map(|(&s, &m)| acov_variance(s, n, m))
                .collect()
        })
        .collect();
    Ok(AcovEstimate {
        grid: grid.clone(),
        nz,
        n_steps: n,
        pairs,
        sigma2,
        var_weights,
    })
}
