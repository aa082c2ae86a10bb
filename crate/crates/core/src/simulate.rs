//! Synthetic trajectories and measurement records, plus the preprocessing
//! applied to ingested logs (decimation and outlier removal).

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::EnsembleModel;
use crate::numerics;

/// Relative tolerance for negative eigenvalues when factoring noise covariances.
pub const FACTOR_RTOL: f64 = 1e-12;

/// Default outlier threshold in robust standard deviations.
pub const DEFAULT_OUTLIER_K: f64 = 5.0;

/// Normal-consistent scaling of the median absolute deviation.
const MAD_TO_SIGMA: f64 = 1.482_602_218_505_602;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Synthetic { seed: u64 },
    Ingested { path: PathBuf },
}

/// Uniformly sampled differential phase measurements.
///
/// `z` is `n_z x (N + 1)`: column `k` holds `z_k` [s].
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementRecord {
    ts: f64,
    z: DMatrix<f64>,
    origin: Origin,
}

impl MeasurementRecord {
    pub fn new(ts: f64, z: DMatrix<f64>, origin: Origin) -> Result<Self> {
        if !(ts.is_finite() && ts > 0.0) {
            return invalid(format!("sampling period must be positive, got {ts}"));
        }
        if z.nrows() == 0 {
            return invalid("record has no channels");
        }
        if z.ncols() < 2 {
            return invalid(format!("record needs at least 2 samples, got {}", z.ncols()));
        }
        if let Some(pos) = z.iter().position(|v| !v.is_finite()) {
            return invalid(format!(
                "non-finite sample in channel {} at step {}",
                pos % z.nrows() + 1,
                pos / z.nrows()
            ));
        }
        Ok(MeasurementRecord { ts, z, origin })
    }

    pub fn ts(&self) -> f64 {
        self.ts
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn origin(&self) -> &Origin {
        &self.origin
    }

    pub fn nz(&self) -> usize {
        self.z.nrows()
    }

    /// `N`: the index of the last sample.
    pub fn n_steps(&self) -> usize {
        self.z.ncols() - 1
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.z.row(c).iter().copied().collect()
    }
}

/// True ensemble states `x_0..x_N`, one column per step.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTrajectory {
    pub x: DMatrix<f64>,
}

/// Seed of Monte-Carlo run `run` derived from a master seed.
pub fn derive_seed(master: u64, run: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(run);
    rng.next_u64()
}

fn checked_factor(cov: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let trace = cov.trace();
    let asym = (cov - cov.transpose()).norm();
    if asym > 1e-12 * cov.norm() {
        return Err(Error::InvalidCovariance(format!("{what} is not symmetric")));
    }
    if !cov.is_empty() && numerics::min_eigenvalue(cov) < -FACTOR_RTOL * trace.abs() {
        return Err(Error::InvalidCovariance(format!("{what} has a negative eigenvalue")));
    }
    numerics::semidefinite_cholesky(cov, FACTOR_RTOL)
}

/// Runs the state recursion, handing each `(k, x_k, z_k)` to `sink`.
///
/// Per step, `n_z` measurement normals are drawn before `2n` state normals.
fn run_recursion(
    model: &EnsembleModel,
    n_steps: usize,
    seed: u64,
    x0: Option<&DVector<f64>>,
    mut sink: impl FnMut(usize, &[f64], &[f64]),
) -> Result<()> {
    if n_steps < 1 {
        return invalid("simulation needs N >= 1");
    }
    let nx = model.nx();
    let nz = model.nz();
    if model.f.shape() != (nx, nx) || model.h.shape() != (nz, nx) || model.q.shape() != (nx, nx) {
        return invalid("model matrices have inconsistent dimensions");
    }
    let lq = checked_factor(&model.q, "Q")?;
    let lr = checked_factor(&model.r, "R")?;
    let mut x: Vec<f64> = match x0 {
        Some(v) if v.len() != nx => return invalid(format!("x0 must have {nx} entries")),
        Some(v) => v.iter().copied().collect(),
        None => vec![0.0; nx],
    };
    // row-major copies for the inner loops
    let f: Vec<f64> = model.f.transpose().iter().copied().collect();
    let h: Vec<f64> = model.h.transpose().iter().copied().collect();
    let lq: Vec<f64> = lq.transpose().iter().copied().collect();
    let lr: Vec<f64> = lr.transpose().iter().copied().collect();
    let mu: Vec<f64> = model.mu.iter().copied().collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xi_v = vec![0.0; nz];
    let mut xi_w = vec![0.0; nx];
    let mut z = vec![0.0; nz];
    let mut xn = vec![0.0; nx];

    for k in 0..=n_steps {
        for v in xi_v.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        for i in 0..nz {
            let hrow = &h[i * nx..(i + 1) * nx];
            let lrow = &lr[i * nz..i * nz + i + 1];
            let mut acc = 0.0;
            for (a, b) in hrow.iter().zip(&x) {
                acc += a * b;
            }
            for (a, b) in lrow.iter().zip(&xi_v) {
                acc += a * b;
            }
            z[i] = acc;
        }
        sink(k, &x, &z);
        if k == n_steps {
            break;
        }
        for v in xi_w.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        for i in 0..nx {
            let frow = &f[i * nx..(i + 1) * nx];
            let lrow = &lq[i * nx..i * nx + i + 1];
            let mut acc = mu[i];
            for (a, b) in frow.iter().zip(&x) {
                acc += a * b;
            }
            for (a, b) in lrow.iter().zip(&xi_w) {
                acc += a * b;
            }
            xn[i] = acc;
        }
        std::mem::swap(&mut x, &mut xn);
    }
    Ok(())
}

/// Simulates `x_{k+1} = F x_k + w_k`, `z_k = H x_k + v_k` for `k = 0..=N`.
///
/// `w_k ~ N(mu, Q)` and `v_k ~ N(0, R)` are drawn through lower-triangular
/// factors. `x0` defaults to zero. Identical arguments give identical output.
pub fn simulate_ensemble(
    model: &EnsembleModel,
    n_steps: usize,
    seed: u64,
    x0: Option<&DVector<f64>>,
) -> Result<(StateTrajectory, MeasurementRecord)> {
    let nx = model.nx();
    let nz = model.nz();
    let mut xs = DMatrix::zeros(nx, n_steps + 1);
    let mut zs = DMatrix::zeros(nz, n_steps + 1);
    run_recursion(model, n_steps, seed, x0, |k, x, z| {
        xs.column_mut(k).copy_from_slice(x);
        zs.column_mut(k).copy_from_slice(z);
    })?;
    let rec = MeasurementRecord::new(model.ts, zs, Origin::Synthetic { seed })?;
    Ok((StateTrajectory { x: xs }, rec))
}

/// Same draws as [`simulate_ensemble`] without keeping the state trajectory.
pub fn simulate_measurements(
    model: &EnsembleModel,
    n_steps: usize,
    seed: u64,
    x0: Option<&DVector<f64>>,
) -> Result<MeasurementRecord> {
    let mut zs = DMatrix::zeros(model.nz(), n_steps + 1);
    run_recursion(model, n_steps, seed, x0, |k, _, z| {
        zs.column_mut(k).copy_from_slice(z);
    })?;
    MeasurementRecord::new(model.ts, zs, Origin::Synthetic { seed })
}

/// Keeps every `factor`-th sample starting at index 0; `Ts' = factor * Ts`.
pub fn decimate(record: &MeasurementRecord, factor: usize) -> Result<MeasurementRecord> {
    if factor == 0 {
        return invalid("decimation factor must be at least 1");
    }
    let n_new = record.n_steps() / factor;
    if n_new < 1 {
        return invalid(format!(
            "decimation by {factor} leaves fewer than 2 samples out of {}",
            record.n_steps() + 1
        ));
    }
    let nz = record.nz();
    let z = DMatrix::from_fn(nz, n_new + 1, |c, k| record.z[(c, k * factor)]);
    MeasurementRecord::new(record.ts * factor as f64, z, record.origin.clone())
}

/// Flagged sample indices per channel from [`remove_outliers`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OutlierReport {
    pub flagged: Vec<Vec<usize>>,
}

impl OutlierReport {
    pub fn total(&self) -> usize {
        self.flagged.iter().map(Vec::len).sum()
    }
}

fn median(v: &mut [f64]) -> f64 {
    let n = v.len();
    let mid = n / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *m;
    if n % 2 == 1 {
        upper
    } else {
        let lower = v[..mid].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Sample indices of isolated phase outliers in one channel.
fn detect_channel(z: &[f64], k: f64) -> Vec<usize> {
    let len = z.len();
    if len < 3 {
        return Vec::new();
    }
    // dev[j - 1] belongs to the second difference centred on sample j
    let d2: Vec<f64> = (1..len - 1).map(|j| z[j + 1] - 2.0 * z[j] + z[j - 1]).collect();
    let mut scratch = d2.clone();
    let med = median(&mut scratch);
    let dev: Vec<f64> = d2.iter().map(|v| v - med).collect();
    scratch.iter_mut().zip(&dev).for_each(|(s, d)| *s = d.abs());
    let sigma = MAD_TO_SIGMA * median(&mut scratch);
    let zmax = z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let threshold = (k * sigma).max(64.0 * f64::EPSILON * zmax);

    let mut flagged = Vec::new();
    let mut j = 0;
    while j < dev.len() {
        if dev[j].abs() <= threshold {
            j += 1;
            continue;
        }
        let start = j;
        while j < dev.len() && dev[j].abs() > threshold {
            j += 1;
        }
        let cluster = start..j;
        if cluster.len() > 3 {
            // wider than a single-sample spike signature: treat as a burst
            flagged.extend(cluster.map(|c| c + 1));
            continue;
        }
        let peak = cluster
            .clone()
            .max_by(|&a, &b| dev[a].abs().total_cmp(&dev[b].abs()))
            .unwrap();
        let mut sample = peak + 1;
        // A spike on an end sample touches a single second difference, while a
        // spike next to the end leaves an opposite-signed half-size neighbour.
        if cluster.len() == 1 {
            if peak == 0 && !opposite_half(&dev, 0, 1) {
                sample = 0;
            } else if peak + 1 == dev.len() && (peak == 0 || !opposite_half(&dev, peak, peak - 1)) {
                sample = len - 1;
            }
        }
        flagged.push(sample);
    }
    flagged.sort_unstable();
    flagged.dedup();
    flagged
}

fn opposite_half(dev: &[f64], peak: usize, neighbour: usize) -> bool {
    neighbour < dev.len() && dev[neighbour] / dev[peak] < -0.25
}

/// Flags phase outliers on the robust scale of second differences and
/// replaces them by linear interpolation between unflagged neighbours.
///
/// A sample is flagged when its second difference deviates from the channel
/// median by more than `k` normal-consistent MADs. Channels with more than
/// half of their samples flagged are rejected.
pub fn remove_outliers(record: &MeasurementRecord, k: f64) -> Result<(MeasurementRecord, OutlierReport)> {
    if !(k.is_finite() && k > 0.0) {
        return invalid(format!("outlier threshold must be positive, got {k}"));
    }
    let mut z = record.z.clone();
    let mut report = OutlierReport::default();
    let len = z.ncols();
    for c in 0..record.nz() {
        let chan = record.channel(c);
        let flags = detect_channel(&chan, k);
        if 2 * flags.len() > len {
            return Err(Error::ChannelUnusable {
                channel: c + 1,
                flagged: flags.len(),
                total: len,
            });
        }
        let mut bad = vec![false; len];
        for &i in &flags {
            bad[i] = true;
        }
        for &i in &flags {
            let prev = (0..i).rev().find(|&p| !bad[p]);
            let next = (i + 1..len).find(|&p| !bad[p]);
            z[(c, i)] = match (prev, next) {
                (Some(p), Some(nx)) => {
                    let w = (i - p) as f64 / (nx - p) as f64;
                    chan[p] + w * (chan[nx] - chan[p])
                }
                (Some(p), None) => chan[p],
                (None, Some(nx)) => chan[nx],
                (None, None) => chan[i],
            };
        }
        report.flagged.push(flags);
    }
    Ok((MeasurementRecord::new(record.ts, z, record.origin.clone())?, report))
}
