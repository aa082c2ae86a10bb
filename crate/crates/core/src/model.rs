//! Clock and ensemble state-space structure.
//!
//! A clock state is `[phase, frequency]`. The ensemble stacks `n` clocks, the
//! first being the pivot, and measures `n_z = n - 1` phase differences
//! `phase_{i+1} - phase_1`.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics;

/// Noise intensities and drift of a single clock.
///
/// `q1` is the white-FM intensity [s], `q2` the random-walk-FM intensity
/// [1/s] and `d` the linear frequency drift [1/s].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClockParams {
    pub q1: f64,
    pub q2: f64,
    pub d: f64,
}

impl ClockParams {
    pub fn new(q1: f64, q2: f64, d: f64) -> Self {
        ClockParams { q1, q2, d }
    }

    fn validate(&self, idx: usize) -> Result<()> {
        if !(self.q1.is_finite() && self.q1 >= 0.0) || !(self.q2.is_finite() && self.q2 >= 0.0) {
            return invalid(format!("clock {}: q1 and q2 must be finite and non-negative", idx + 1));
        }
        if !self.d.is_finite() {
            return invalid(format!("clock {}: drift must be finite", idx + 1));
        }
        Ok(())
    }

    /// Allan variance of this clock alone at averaging time `tau`.
    pub fn avar(&self, tau: f64) -> f64 {
        self.q1 / tau + self.q2 * tau / 3.0 + self.d * self.d * tau * tau / 2.0
    }
}

/// Row-major upper-triangle index pairs `(i, j)`, `i <= j`, of an `nz x nz` matrix.
pub fn upper_pairs(nz: usize) -> Vec<(usize, usize)> {
    (0..nz).flat_map(|i| (i..nz).map(move |j| (i, j))).collect()
}

pub fn upper_len(nz: usize) -> usize {
    nz * (nz + 1) / 2
}

/// Full parameter set of an ensemble: per-clock noise plus measurement covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleParams {
    clocks: Vec<ClockParams>,
    r: DMatrix<f64>,
}

impl EnsembleParams {
    pub fn new(clocks: Vec<ClockParams>, r: DMatrix<f64>) -> Result<Self> {
        let n = clocks.len();
        if n < 2 {
            return invalid(format!("an ensemble needs at least 2 clocks, got {n}"));
        }
        for (i, c) in clocks.iter().enumerate() {
            c.validate(i)?;
        }
        let nz = n - 1;
        if r.nrows() != nz || r.ncols() != nz {
            return invalid(format!("R must be {nz}x{nz}, got {}x{}", r.nrows(), r.ncols()));
        }
        if r.iter().any(|v| !v.is_finite()) {
            return invalid("R has non-finite entries");
        }
        let scale = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..nz {
            for j in (i + 1)..nz {
                if (r[(i, j)] - r[(j, i)]).abs() > 1e-12 * scale {
                    return invalid(format!("R is not symmetric at ({}, {})", i + 1, j + 1));
                }
            }
        }
        let trace = r.trace();
        if numerics::min_eigenvalue(&r) < -1e-12 * trace.abs() {
            return Err(Error::InvalidCovariance("R is not positive semi-definite".into()));
        }
        Ok(EnsembleParams { clocks, r })
    }

    /// Builds `R` from its row-major upper triangle.
    pub fn from_r_upper(clocks: Vec<ClockParams>, r_upper: &[f64]) -> Result<Self> {
        let nz = clocks.len().saturating_sub(1);
        if r_upper.len() != upper_len(nz) {
            return invalid(format!(
                "r_upper must have {} entries for {} clocks, got {}",
                upper_len(nz),
                clocks.len(),
                r_upper.len()
            ));
        }
        let mut r = DMatrix::zeros(nz, nz);
        for ((i, j), v) in upper_pairs(nz).into_iter().zip(r_upper) {
            r[(i, j)] = *v;
            r[(j, i)] = *v;
        }
        Self::new(clocks, r)
    }

    pub fn n(&self) -> usize {
        self.clocks.len()
    }

    pub fn nz(&self) -> usize {
        self.clocks.len() - 1
    }

    pub fn clocks(&self) -> &[ClockParams] {
        &self.clocks
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn r_upper(&self) -> Vec<f64> {
        upper_pairs(self.nz())
            .into_iter()
            .map(|(i, j)| self.r[(i, j)])
            .collect()
    }

    /// Drift of clock `i + 1` relative to the pivot, for channel `i` (0-based).
    pub fn relative_drift(&self, channel: usize) -> f64 {
        self.clocks[channel + 1].d - self.clocks[0].d
    }
}

/// `[[1, Ts], [0, 1]]`.
pub fn clock_transition(ts: f64) -> Result<Matrix2<f64>> {
    if !(ts.is_finite() && ts >= 0.0) {
        return invalid(format!("sampling period must be non-negative, got {ts}"));
    }
    Ok(Matrix2::new(1.0, ts, 0.0, 1.0))
}

fn check_period(ts: f64) -> Result<()> {
    if !(ts.is_finite() && ts > 0.0) {
        return invalid(format!("sampling period must be positive, got {ts}"));
    }
    Ok(())
}

/// Discretized covariance of the state noise of one clock over `ts`.
pub fn clock_noise_cov(q1: f64, q2: f64, ts: f64) -> Result<Matrix2<f64>> {
    check_period(ts)?;
    let off = q2 * ts * ts / 2.0;
    Ok(Matrix2::new(q1 * ts + q2 * ts.powi(3) / 3.0, off, off, q2 * ts))
}

/// Mean of the state noise of one clock: the drift integrated over `ts`.
pub fn clock_drift_mean(d: f64, ts: f64) -> Result<Vector2<f64>> {
    check_period(ts)?;
    Ok(Vector2::new(d * ts * ts / 2.0, d * ts))
}

/// `I_n ⊗ [[1, Ts], [0, 1]]`.
pub fn transition_matrix(n: usize, ts: f64) -> Result<DMatrix<f64>> {
    let f1 = clock_transition(ts)?;
    let mut f = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        f.fixed_view_mut::<2, 2>(2 * i, 2 * i).copy_from(&f1);
    }
    Ok(f)
}

/// Pivot-difference measurement matrix: row `i` is `e_{phase(i+1)} - e_{phase(0)}`.
pub fn measurement_matrix(n: usize) -> Result<DMatrix<f64>> {
    if n < 2 {
        return invalid(format!("an ensemble needs at least 2 clocks, got {n}"));
    }
    let mut h = DMatrix::zeros(n - 1, 2 * n);
    for i in 0..n - 1 {
        h[(i, 0)] = -1.0;
        h[(i, 2 * (i + 1))] = 1.0;
    }
    Ok(h)
}

/// Assembled linear-Gaussian ensemble model at a fixed sampling period.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    pub f: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub mu: DVector<f64>,
    pub r: DMatrix<f64>,
    pub ts: f64,
    pub n: usize,
}

impl EnsembleModel {
    pub fn assemble(params: &EnsembleParams, ts: f64) -> Result<Self> {
        check_period(ts)?;
        let n = params.n();
        let mut q = DMatrix::zeros(2 * n, 2 * n);
        let mut mu = DVector::zeros(2 * n);
        for (i, c) in params.clocks().iter().enumerate() {
            q.fixed_view_mut::<2, 2>(2 * i, 2 * i)
                .copy_from(&clock_noise_cov(c.q1, c.q2, ts)?);
            mu.fixed_rows_mut::<2>(2 * i).copy_from(&clock_drift_mean(c.d, ts)?);
        }
        Ok(EnsembleModel {
            f: transition_matrix(n, ts)?,
            h: measurement_matrix(n)?,
            q,
            mu,
            r: params.r().clone(),
            ts,
            n,
        })
    }

    pub fn nz(&self) -> usize {
        self.n - 1
    }

    pub fn nx(&self) -> usize {
        2 * self.n
    }
}

/// Full parameter vector
/// `[q1(1..n), q2(1..n), d(1..n), r_upper (row-major)]`, length `n(n+5)/2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaVector(pub Vec<f64>);

impl ThetaVector {
    pub fn len_for(n: usize) -> usize {
        n * (n + 5) / 2
    }

    pub fn pack(params: &EnsembleParams) -> Self {
        let c = params.clocks();
        let mut v = Vec::with_capacity(Self::len_for(c.len()));
        v.extend(c.iter().map(|c| c.q1));
        v.extend(c.iter().map(|c| c.q2));
        v.extend(c.iter().map(|c| c.d));
        v.extend(params.r_upper());
        ThetaVector(v)
    }

    pub fn unpack(&self, n: usize) -> Result<EnsembleParams> {
        if self.0.len() != Self::len_for(n) {
            return invalid(format!(
                "theta for {n} clocks needs {} entries, got {}",
                Self::len_for(n),
                self.0.len()
            ));
        }
        let v = &self.0;
        let clocks = (0..n).map(|i| ClockParams::new(v[i], v[n + i], v[2 * n + i])).collect();
        EnsembleParams::from_r_upper(clocks, &v[3 * n..])
    }

    /// Human-readable labels, 1-based clock and channel indices.
    pub fn labels(n: usize) -> Vec<String> {
        let mut out = Vec::with_capacity(Self::len_for(n));
        for name in ["q1", "q2", "d"] {
            out.extend((1..=n).map(|i| format!("{name}[{i}]")));
        }
        out.extend(
            upper_pairs(n - 1)
                .into_iter()
                .map(|(i, j)| format!("r[{},{}]", i + 1, j + 1)),
        );
        out
    }
}

/// On-disk ensemble description: sampling period, clocks and `R` upper triangle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub ts_seconds: f64,
    pub clocks: Vec<ClockParams>,
    pub r_upper: Vec<f64>,
}

impl EnsembleConfig {
    pub fn params(&self) -> Result<EnsembleParams> {
        EnsembleParams::from_r_upper(self.clocks.clone(), &self.r_upper)
    }

    pub fn from_params(params: &EnsembleParams, ts: f64) -> Self {
        EnsembleConfig {
            ts_seconds: ts,
            clocks: params.clocks().to_vec(),
            r_upper: params.r_upper(),
        }
    }
}

/// The four-maser simulation scenario: clock table and measurement covariance.
pub fn maser_ensemble_params() -> EnsembleParams {
    let clocks = vec![
        ClockParams::new(1.0e-27, 0.1e-35, 0.0),
        ClockParams::new(1.5e-27, 2.0e-35, 8.0e-21),
        ClockParams::new(5.0e-27, 1.5e-35, 7.5e-21),
        ClockParams::new(7.0e-27, 2.5e-35, 3.0e-21),
    ];
    let r_upper = [9.0e-35, 6.0e-35, 5.0e-35, 8.7e-35, 4.0e-35, 9.5e-35];
    EnsembleParams::from_r_upper(clocks, &r_upper).expect("scenario parameters are valid")
}
