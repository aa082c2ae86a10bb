//! Identification by the measurement difference method.
//!
//! `L` consecutive measurements are stacked as `Z_k = O x_k + Gamma W_k + V_k`.
//! Multiplying by an annihilator `Am` of `O` removes the unknown state and
//! leaves a residue driven only by the noises. Its mean is linear in the
//! drifts and its second moment is linear in `theta_alpha =
//! [q1(1..n), q2(1..n), r_upper]`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::ident_acov::clamp_negative;
use crate::model::{upper_len, upper_pairs, ClockParams, EnsembleModel, EnsembleParams};
use crate::numerics::{self, RankRevealing, NULL_SPACE_RTOL, PINV_RTOL};
use crate::report::{Diagnostics, EstimateReport, Method};
use crate::simulate::{decimate, MeasurementRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdmConfig {
    /// Window length `L >= 2`.
    pub l: usize,
    /// Resampling period in seconds; an integer multiple of the record period.
    pub ts_target: f64,
    /// Return a minimum-norm solution instead of failing on rank deficiency.
    pub allow_rank_deficient: bool,
}

impl Default for MdmConfig {
    fn default() -> Self {
        MdmConfig {
            l: 5,
            ts_target: 5000.0,
            allow_rank_deficient: false,
        }
    }
}

/// Stacked matrices of one `(n, Ts, L)` configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct MdmSystem {
    pub n: usize,
    pub l: usize,
    pub ts: f64,
    /// `[H; HF; ...; HF^{L-1}]`, `L n_z x 2n`.
    pub o: DMatrix<f64>,
    /// Strictly lower block-Toeplitz noise propagation, `L n_z x (L-1) 2n`.
    pub gamma: DMatrix<f64>,
    /// Orthonormal rows spanning the left null space of `O`.
    pub am: DMatrix<f64>,
    /// `Am [Gamma, I]`, `n_aO x n_E`.
    pub a: DMatrix<f64>,
    /// `Am Gamma Upsilon_d`, `n_aO x n`; column `c` is the residue mean per unit drift of clock `c`.
    pub drift_map: DMatrix<f64>,
    /// `(A kron A) Upsilon_theta_alpha`, `n_aO^2 x n(n+3)/2`.
    pub theta_map: DMatrix<f64>,
}

impl MdmSystem {
    pub fn n_ao(&self) -> usize {
        self.am.nrows()
    }

    pub fn n_e(&self) -> usize {
        self.a.ncols()
    }

    pub fn nz(&self) -> usize {
        self.n - 1
    }
}

/// Length of `theta_alpha` for `n` clocks.
pub fn theta_alpha_len(n: usize) -> usize {
    n * (n + 3) / 2
}

/// Labels of `theta_alpha` entries.
pub fn theta_alpha_labels(n: usize) -> Vec<String> {
    let mut out: Vec<String> = (1..=n).map(|c| format!("q1[{c}]")).collect();
    out.extend((1..=n).map(|c| format!("q2[{c}]")));
    out.extend(
        upper_pairs(n - 1)
            .into_iter()
            .map(|(i, j)| format!("r[{},{}]", i + 1, j + 1)),
    );
    out
}

/// `theta_alpha` of a parameter set.
pub fn theta_alpha_of(params: &EnsembleParams) -> Vec<f64> {
    let mut v: Vec<f64> = params.clocks().iter().map(|c| c.q1).collect();
    v.extend(params.clocks().iter().map(|c| c.q2));
    v.extend(params.r_upper());
    v
}

/// Structure matrices `(B_Q^(i), B_R^(i))` with `Q = sum theta_i B_Q^(i)`, `R = sum theta_i B_R^(i)`.
pub fn build_structure_matrices(n: usize, ts: f64) -> Result<Vec<(DMatrix<f64>, DMatrix<f64>)>> {
    if n < 2 {
        return invalid("an ensemble needs at least 2 clocks");
    }
    if !(ts > 0.0 && ts.is_finite()) {
        return invalid(format!("sampling period must be positive, got {ts}"));
    }
    let nz = n - 1;
    let nx = 2 * n;
    let mut out = Vec::with_capacity(theta_alpha_len(n));
    for c in 0..n {
        let mut bq = DMatrix::zeros(nx, nx);
        bq[(2 * c, 2 * c)] = ts;
        out.push((bq, DMatrix::zeros(nz, nz)));
    }
    for c in 0..n {
        let mut bq = DMatrix::zeros(nx, nx);
        bq[(2 * c, 2 * c)] = ts.powi(3) / 3.0;
        bq[(2 * c, 2 * c + 1)] = ts * ts / 2.0;
        bq[(2 * c + 1, 2 * c)] = ts * ts / 2.0;
        bq[(2 * c + 1, 2 * c + 1)] = ts;
        out.push((bq, DMatrix::zeros(nz, nz)));
    }
    for (i, j) in upper_pairs(nz) {
        let mut br = DMatrix::zeros(nz, nz);
        br[(i, j)] = 1.0;
        br[(j, i)] = 1.0;
        out.push((DMatrix::zeros(nx, nx), br));
    }
    Ok(out)
}

/// Block-diagonal `diag(I_{L-1} kron BQ, I_L kron BR)`.
fn noise_cov_stack(bq: &DMatrix<f64>, br: &DMatrix<f64>, l: usize) -> DMatrix<f64> {
    let (nx, nz) = (bq.nrows(), br.nrows());
    let dim = (l - 1) * nx + l * nz;
    let mut out = DMatrix::zeros(dim, dim);
    for b in 0..l - 1 {
        out.view_mut((b * nx, b * nx), (nx, nx)).copy_from(bq);
    }
    let off = (l - 1) * nx;
    for b in 0..l {
        out.view_mut((off + b * nz, off + b * nz), (nz, nz)).copy_from(br);
    }
    out
}

/// Builds `O`, `Gamma`, the annihilator and the drift and moment maps.
pub fn build_mdm_system(n: usize, ts: f64, l: usize) -> Result<MdmSystem> {
    if l < 2 {
        return invalid(format!("window length L must be at least 2, got {l}"));
    }
    let structure = build_structure_matrices(n, ts)?;
    let f = crate::model::transition_matrix(n, ts)?;
    let h = crate::model::measurement_matrix(n)?;
    let nz = n - 1;
    let nx = 2 * n;

    // HF^j for j = 0..L-1
    let mut hf = Vec::with_capacity(l);
    let mut cur = h.clone();
    for _ in 0..l {
        hf.push(cur.clone());
        cur = &cur * &f;
    }
    let mut o = DMatrix::zeros(l * nz, nx);
    for (j, block) in hf.iter().enumerate() {
        o.view_mut((j * nz, 0), (nz, nx)).copy_from(block);
    }
    let mut gamma = DMatrix::zeros(l * nz, (l - 1) * nx);
    for r in 1..l {
        for c in 0..r {
            gamma.view_mut((r * nz, c * nx), (nz, nx)).copy_from(&hf[r - 1 - c]);
        }
    }

    let am = numerics::left_null_space(&o, NULL_SPACE_RTOL)?;
    if am.nrows() == 0 {
        return Err(Error::NoResidue { rows: o.nrows() });
    }
    let mut stacked = DMatrix::zeros(l * nz, (l - 1) * nx + l * nz);
    stacked.view_mut((0, 0), gamma.shape()).copy_from(&gamma);
    stacked
        .view_mut((0, (l - 1) * nx), (l * nz, l * nz))
        .fill_with_identity();
    let a = &am * stacked;

    let mut upsilon_d = DMatrix::zeros((l - 1) * nx, n);
    for b in 0..l - 1 {
        for c in 0..n {
            upsilon_d[(b * nx + 2 * c, c)] = ts * ts / 2.0;
            upsilon_d[(b * nx + 2 * c + 1, c)] = ts;
        }
    }
    let drift_map = &am * &gamma * upsilon_d;

    let n_ao = am.nrows();
    let mut theta_map = DMatrix::zeros(n_ao * n_ao, structure.len());
    for (t, (bq, br)) in structure.iter().enumerate() {
        let cov = &a * noise_cov_stack(bq, br, l) * a.transpose();
        theta_map.column_mut(t).copy_from_slice(cov.as_slice());
    }

    Ok(MdmSystem {
        n,
        l,
        ts,
        o,
        gamma,
        am,
        a,
        drift_map,
        theta_map,
    })
}

/// Residues `Am [z_k; ...; z_{k+L-1}]` as columns, `k = 0..N-L+1`.
pub fn compute_residues(record: &MeasurementRecord, system: &MdmSystem) -> Result<DMatrix<f64>> {
    let nz = system.nz();
    if record.nz() != nz {
        return invalid(format!("record has {} channels, system expects {nz}", record.nz()));
    }
    let samples = record.n_steps() + 1;
    let l = system.l;
    if samples < l {
        return invalid(format!("record has {samples} samples, shorter than the window L = {l}"));
    }
    let count = samples - l + 1;
    let z = record.z().as_slice();
    let n_ao = system.n_ao();
    let am = &system.am;
    let width = l * nz;
    let mut out = DMatrix::zeros(n_ao, count);
    for k in 0..count {
        let window = &z[k * nz..k * nz + width];
        let mut col = out.column_mut(k);
        for r in 0..n_ao {
            let mut s = 0.0;
            for (c, v) in window.iter().enumerate() {
                s += am[(r, c)] * v;
            }
            col[r] = s;
        }
    }
    Ok(out)
}

/// Drifts of clocks `2..n` from a residue mean, with the pivot drift `d1` known.
pub fn drifts_from_mean(system: &MdmSystem, mean: &DVector<f64>, d1: f64) -> Result<Vec<f64>> {
    if mean.len() != system.n_ao() {
        return invalid("residue mean length differs from the residue dimension");
    }
    let sub = system.drift_map.columns(1, system.n - 1).into_owned();
    let needed = system.n - 1;
    let rr = RankRevealing::new(&sub, PINV_RTOL);
    if rr.rank() < needed {
        return Err(Error::DriftUnidentifiable {
            l: system.l,
            rank: rr.rank(),
            needed,
            suggested: system.l + 1,
        });
    }
    let rhs = mean - system.drift_map.column(0) * d1;
    Ok(rr.solve(&rhs).iter().copied().collect())
}

/// Drift estimates with approximate standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct MdmDrifts {
    pub drifts: Vec<f64>,
    pub std_errors: Vec<f64>,
}

/// Long-run covariance of the residue mean, summing lag covariances up to `L-1`.
fn long_run_covariance(centered: &DMatrix<f64>, max_lag: usize) -> DMatrix<f64> {
    let (dim, count) = centered.shape();
    let mut out = DMatrix::zeros(dim, dim);
    for h in 0..=max_lag.min(count.saturating_sub(1)) {
        let left = centered.columns(h, count - h);
        let right = centered.columns(0, count - h);
        let g = left * right.transpose() / count as f64;
        if h == 0 {
            out += g;
        } else {
            out += &g + g.transpose();
        }
    }
    out
}

/// Drift stage: sample mean of the residues mapped through the drift pseudo-inverse.
pub fn estimate_drifts_mdm(residues: &DMatrix<f64>, system: &MdmSystem, d1: f64) -> Result<MdmDrifts> {
    let count = residues.ncols();
    if count == 0 {
        return invalid("no residues to average");
    }
    let mean = residues.column_mean();
    let drifts = drifts_from_mean(system, &mean, d1)?;

    let centered = residues - &mean * DVector::from_element(count, 1.0).transpose();
    let lr = long_run_covariance(&centered, system.l - 1);
    let sub = system.drift_map.columns(1, system.n - 1).into_owned();
    let pinv = sub
        .pseudo_inverse(PINV_RTOL)
        .map_err(|e| Error::Diverged(e.to_string()))?;
    let cov = &pinv * lr * pinv.transpose() / count as f64;
    let std_errors = (0..system.n - 1).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
    Ok(MdmDrifts { drifts, std_errors })
}

/// Output of [`theta_alpha_from_moment`].
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaAlphaFit {
    pub values: Vec<f64>,
    pub residual: f64,
    pub cond: f64,
    pub rank: usize,
    pub std_errors: Vec<f64>,
    pub clamped: Vec<String>,
    pub null_directions: Vec<Vec<f64>>,
}

/// Solves `theta_map theta = vec(S)` by pseudo-inverse for a residue second moment `S`.
pub fn theta_alpha_from_moment(
    system: &MdmSystem,
    moment: &DMatrix<f64>,
    allow_rank_deficient: bool,
) -> Result<ThetaAlphaFit> {
    let n_ao = system.n_ao();
    if moment.shape() != (n_ao, n_ao) {
        return invalid(format!("moment must be {n_ao}x{n_ao}, got {:?}", moment.shape()));
    }
    let map = &system.theta_map;
    let b = DVector::from_column_slice(moment.as_slice());
    let scales: Vec<f64> = map
        .column_iter()
        .map(|c| c.norm())
        .map(|s| if s > 0.0 { s } else { 1.0 })
        .collect();
    let mut scaled = map.clone();
    for (c, s) in scales.iter().enumerate() {
        scaled.column_mut(c).unscale_mut(*s);
    }
    let rr = RankRevealing::new(&scaled, PINV_RTOL);
    let n_theta = map.ncols();
    let rank = rr.rank();
    let unscale = |v: DVector<f64>| -> Vec<f64> { v.iter().zip(&scales).map(|(x, s)| x / s).collect() };
    let null_directions: Vec<Vec<f64>> = rr
        .null_space()
        .column_iter()
        .map(|c| {
            let v = unscale(c.into_owned());
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / norm).collect()
        })
        .collect();
    if rank < n_theta && !allow_rank_deficient {
        return Err(Error::Unidentifiable {
            reason: format!(
                "residue moment map has rank {rank} < {n_theta} with L = {}; a larger L may help",
                system.l
            ),
            null_directions,
        });
    }
    let y = rr.solve(&b);
    let mut values = unscale(y.clone());
    let residual = (&b - &scaled * &y).norm();

    // approximate errors from the residual spread over the moment entries
    let dof = (n_ao * n_ao).saturating_sub(rank);
    let sigma2 = if dof > 0 { residual * residual / dof as f64 } else { 0.0 };
    let gram = rr.gram_pinv();
    let std_errors: Vec<f64> = (0..n_theta)
        .map(|i| (sigma2 * gram[(i, i)]).max(0.0).sqrt() / scales[i])
        .collect();

    let n = system.n;
    let mut variance_cols: Vec<usize> = (0..2 * n).collect();
    let nz = n - 1;
    for (k, (i, j)) in upper_pairs(nz).into_iter().enumerate() {
        if i == j {
            variance_cols.push(2 * n + k);
        }
    }
    let clamped = clamp_negative(&mut values, &variance_cols, &std_errors, &theta_alpha_labels(n));
    Ok(ThetaAlphaFit {
        values,
        residual,
        cond: rr.condition_number(),
        rank,
        std_errors,
        clamped,
        null_directions,
    })
}

/// Second-moment stage: drift-corrected residues, averaged outer products, pseudo-inverse.
pub fn estimate_theta_alpha(
    residues: &DMatrix<f64>,
    drifts: &[f64],
    d1: f64,
    system: &MdmSystem,
    allow_rank_deficient: bool,
) -> Result<ThetaAlphaFit> {
    if drifts.len() != system.n - 1 {
        return invalid("drift vector length differs from n - 1");
    }
    let count = residues.ncols();
    if count == 0 {
        return invalid("no residues to average");
    }
    let mut d = DVector::zeros(system.n);
    d[0] = d1;
    d.rows_mut(1, system.n - 1).copy_from_slice(drifts);
    let mean = &system.drift_map * d;
    let centered = residues - &mean * DVector::from_element(count, 1.0).transpose();
    let moment = &centered * centered.transpose() / count as f64;
    theta_alpha_from_moment(system, &moment, allow_rank_deficient)
}

/// End-to-end MDM estimate: resample, annihilate, drifts from the mean, noise from the second moment.
pub fn estimate_mdm(record: &MeasurementRecord, config: &MdmConfig, d1: f64) -> Result<EstimateReport> {
    if !(config.ts_target > 0.0 && config.ts_target.is_finite()) {
        return invalid(format!("target period must be positive, got {}", config.ts_target));
    }
    let ratio = config.ts_target / record.ts();
    let factor = ratio.round();
    if factor < 1.0 || (ratio - factor).abs() > 1e-9 * ratio {
        return invalid(format!(
            "target period {} s is not an integer multiple of the record period {} s",
            config.ts_target,
            record.ts()
        ));
    }
    let resampled = decimate(record, factor as usize)?;
    let n = record.nz() + 1;
    let system = build_mdm_system(n, resampled.ts(), config.l)?;
    let residues = compute_residues(&resampled, &system)?;
    let drifts = estimate_drifts_mdm(&residues, &system, d1)?;
    let fit = estimate_theta_alpha(&residues, &drifts.drifts, d1, &system, config.allow_rank_deficient)?;

    let v = &fit.values;
    let mut clocks = vec![ClockParams::new(v[0], v[n], d1)];
    for c in 1..n {
        clocks.push(ClockParams::new(v[c], v[n + c], drifts.drifts[c - 1]));
    }
    let r_upper = v[2 * n..].to_vec();
    debug_assert_eq!(r_upper.len(), upper_len(n - 1));

    let mut std_errors = fit.std_errors[..2 * n].to_vec();
    std_errors.push(0.0);
    std_errors.extend(&drifts.std_errors);
    std_errors.extend(&fit.std_errors[2 * n..]);

    let diagnostics = Diagnostics {
        residual: fit.residual,
        cond: fit.cond.is_finite().then_some(fit.cond),
        rank: fit.rank,
        rank_deficient: fit.rank < theta_alpha_len(n),
        clamped: fit.clamped,
        drift_degenerate: false,
        std_errors,
        null_directions: fit.null_directions,
        window: Some(config.l),
        ts_target_s: Some(resampled.ts()),
        n_residue_dim: Some(system.n_ao()),
        ..Diagnostics::default()
    };
    Ok(EstimateReport::assemble(Method::Mdm, clocks, r_upper, diagnostics))
}

/// System for the sampling period and size of an assembled model.
pub fn system_for_model(model: &EnsembleModel, l: usize) -> Result<MdmSystem> {
    build_mdm_system(model.n, model.ts, l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::maser_ensemble_params;
    use crate::simulate::simulate_measurements;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Mean and covariance of `[z_k; ...; z_{k+L-1}]` given `x_k = 0`, from the state recursion.
    fn stacked_moments(model: &EnsembleModel, l: usize) -> (DVector<f64>, DMatrix<f64>) {
        let nz = model.nz();
        let nx = model.nx();
        let mut means = vec![DVector::zeros(nx)];
        let mut covs = vec![DMatrix::zeros(nx, nx)];
        for a in 1..l {
            means.push(&model.f * &means[a - 1] + &model.mu);
            covs.push(&model.f * &covs[a - 1] * model.f.transpose() + &model.q);
        }
        let mut mean = DVector::zeros(l * nz);
        let mut cov = DMatrix::zeros(l * nz, l * nz);
        for a in 0..l {
            mean.rows_mut(a * nz, nz).copy_from(&(&model.h * &means[a]));
            let mut fpow = DMatrix::identity(nx, nx);
            for b in a..l {
                // Cov(x_b, x_a) = F^{b-a} P_a
                let block = &model.h * &fpow * &covs[a] * model.h.transpose();
                cov.view_mut((b * nz, a * nz), (nz, nz)).copy_from(&block);
                cov.view_mut((a * nz, b * nz), (nz, nz)).copy_from(&block.transpose());
                fpow = &model.f * fpow;
            }
            let mut diag = cov.view_mut((a * nz, a * nz), (nz, nz));
            diag += &model.r;
        }
        (mean, cov)
    }

    #[test]
    fn table1_dimensions() {
        let sys = build_mdm_system(4, 5000.0, 5).unwrap();
        assert_eq!(sys.o.shape(), (15, 8));
        assert_eq!(numerics::numerical_rank(&sys.o, NULL_SPACE_RTOL), 6);
        assert_eq!(sys.gamma.shape(), (15, 32));
        assert_eq!(sys.am.shape(), (9, 15));
        assert_eq!(sys.a.shape(), (9, 47));
        assert_eq!(sys.n_e(), 47);
        assert_eq!(sys.drift_map.shape(), (9, 4));
        assert_eq!(sys.theta_map.shape(), (81, 14));
        let ann = (&sys.am * &sys.o).norm();
        assert!(ann <= 1e-10 * sys.o.norm(), "{ann}");
    }

    #[test]
    fn two_clocks_with_l2_have_no_residue() {
        assert!(matches!(
            build_mdm_system(2, 5000.0, 2),
            Err(Error::NoResidue { rows: 2 })
        ));
        assert!(build_mdm_system(2, 5000.0, 1).is_err());
    }

    #[test]
    fn annihilation_and_rank_over_configurations() {
        for n in 2..=5 {
            for l in 3..=6 {
                for ts in [1.0, 5.0, 5000.0] {
                    let sys = build_mdm_system(n, ts, l).unwrap();
                    assert_eq!(numerics::numerical_rank(&sys.o, NULL_SPACE_RTOL), 2 * (n - 1));
                    assert_eq!(sys.n_ao(), l * (n - 1) - 2 * (n - 1));
                    assert!((&sys.am * &sys.o).norm() <= 1e-10 * sys.o.norm());
                    let gram = &sys.am * sys.am.transpose();
                    assert!((gram - DMatrix::identity(sys.n_ao(), sys.n_ao())).norm() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn structure_examples_and_reconstruction() {
        let p = maser_ensemble_params();
        let structure = build_structure_matrices(4, 5000.0).unwrap();
        assert_eq!(structure.len(), 14);
        let i1 = &structure[8].1;
        assert_eq!(i1[(0, 0)], 1.0);
        assert_eq!(i1.sum(), 1.0);
        let i3 = &structure[10].1;
        assert_eq!((i3[(0, 2)], i3[(2, 0)], i3.sum()), (1.0, 1.0, 2.0));
        let theta = theta_alpha_of(&p);
        let model = EnsembleModel::assemble(&p, 5000.0).unwrap();
        let q: DMatrix<f64> = structure.iter().zip(&theta).map(|((bq, _), t)| bq * *t).sum();
        let r: DMatrix<f64> = structure.iter().zip(&theta).map(|((_, br), t)| br * *t).sum();
        assert!((q - &model.q).norm() <= 1e-15 * model.q.norm());
        assert!((r - &model.r).norm() <= 1e-15 * model.r.norm());
    }

    #[test]
    fn kronecker_identity() {
        let sys = build_mdm_system(4, 5000.0, 5).unwrap();
        let aa = sys.a.kronecker(&sys.a);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let e = DVector::from_fn(sys.n_e(), |_, _| rng.random_range(-1.0..1.0));
            let ae = &sys.a * &e;
            let lhs = ae.kronecker(&ae);
            let rhs = &aa * e.kronecker(&e);
            assert!((&lhs - &rhs).norm() <= 1e-12 * lhs.norm());
        }
    }

    #[test]
    fn exact_moments_round_trip() {
        let p = maser_ensemble_params();
        let model = EnsembleModel::assemble(&p, 5000.0).unwrap();
        let sys = system_for_model(&model, 5).unwrap();
        let (mean_z, cov_z) = stacked_moments(&model, 5);
        let mean = &sys.am * mean_z;
        let drifts = drifts_from_mean(&sys, &mean, 0.0).unwrap();
        for (a, c) in drifts.iter().zip(&p.clocks()[1..]) {
            assert_relative_eq!(*a, c.d, max_relative = 1e-12, epsilon = 0.0);
        }
        let moment = &sys.am * cov_z * sys.am.transpose();
        let fit = theta_alpha_from_moment(&sys, &moment, false).unwrap();
        assert!(fit.clamped.is_empty());
        let truth = DVector::from_vec(theta_alpha_of(&p));
        let est = DVector::from_vec(fit.values.clone());
        assert!((&est - &truth).norm() <= 1e-10 * truth.norm());
        // R is eleven orders below the q terms here, so only the q entries are exact elementwise
        for (a, b) in fit.values[..8].iter().zip(truth.iter()) {
            assert_relative_eq!(*a, *b, max_relative = 1e-10, epsilon = 0.0);
        }
    }

    #[test]
    fn exact_moments_round_trip_elementwise_when_balanced() {
        let base = maser_ensemble_params();
        let r = base.r() * 1e10;
        let p = EnsembleParams::new(base.clocks().to_vec(), r).unwrap();
        let model = EnsembleModel::assemble(&p, 5000.0).unwrap();
        let sys = system_for_model(&model, 5).unwrap();
        let (_, cov_z) = stacked_moments(&model, 5);
        let fit = theta_alpha_from_moment(&sys, &(&sys.am * cov_z * sys.am.transpose()), false).unwrap();
        for (a, b) in fit.values.iter().zip(theta_alpha_of(&p)) {
            assert_relative_eq!(*a, b, max_relative = 1e-10, epsilon = 0.0);
        }
    }

    #[test]
    fn theta_map_reproduces_moment() {
        let p = maser_ensemble_params();
        let model = EnsembleModel::assemble(&p, 5000.0).unwrap();
        let sys = system_for_model(&model, 5).unwrap();
        let (_, cov_z) = stacked_moments(&model, 5);
        let moment = &sys.am * cov_z * sys.am.transpose();
        let pred = &sys.theta_map * DVector::from_vec(theta_alpha_of(&p));
        let vec_m = DVector::from_column_slice(moment.as_slice());
        assert!((pred - &vec_m).norm() <= 1e-12 * vec_m.norm());
    }

    #[test]
    fn noiseless_residues_vanish_and_count() {
        let p = EnsembleParams::from_r_upper(vec![ClockParams::new(0.0, 0.0, 0.0); 4], &[0.0; 6]).unwrap();
        let model = EnsembleModel::assemble(&p, 5000.0).unwrap();
        let x0 = DVector::from_vec(vec![1e-6, 1e-12, -2e-6, 3e-12, 5e-7, -1e-12, 0.0, 2e-13]);
        let rec = simulate_measurements(&model, 200, 1, Some(&x0)).unwrap();
        let sys = system_for_model(&model, 5).unwrap();
        let res = compute_residues(&rec, &sys).unwrap();
        assert_eq!(res.ncols(), 200 - 5 + 2);
        assert!(res.amax() <= 1e-10 * rec.z().amax());
    }

    #[test]
    fn short_record_is_rejected() {
        let sys = build_mdm_system(4, 5.0, 5).unwrap();
        let rec = MeasurementRecord::new(
            5.0,
            DMatrix::zeros(3, 4),
            crate::simulate::Origin::Synthetic { seed: 0 },
        )
        .unwrap();
        assert!(matches!(compute_residues(&rec, &sys), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn measurement_noise_only_covariance() {
        let p = EnsembleParams::from_r_upper(
            vec![ClockParams::new(0.0, 0.0, 0.0); 4],
            &[9.0, 6.0, 5.0, 8.7, 4.0, 9.5],
        )
        .unwrap();
        let model = EnsembleModel::assemble(&p, 1.0).unwrap();
        let sys = system_for_model(&model, 5).unwrap();
        let rec = simulate_measurements(&model, 100_000, 2, None).unwrap();
        let res = compute_residues(&rec, &sys).unwrap();
        let s = &res * res.transpose() / res.ncols() as f64;
        let mut blk = DMatrix::zeros(15, 15);
        for b in 0..5 {
            blk.view_mut((3 * b, 3 * b), (3, 3)).copy_from(p.r());
        }
        let expect = &sys.am * blk * sys.am.transpose();
        assert!((s - &expect).norm() <= 0.05 * expect.norm());
    }

    #[test]
    fn drift_identifiability_needs_l3() {
        // L=2 never has residues, so every admissible window has drift rank n-1
        for n in 2..=4 {
            let sys = build_mdm_system(n, 5000.0, 3).unwrap();
            let sub = sys.drift_map.columns(1, n - 1).into_owned();
            assert_eq!(numerics::numerical_rank(&sub, PINV_RTOL), n - 1);
        }
    }

    #[test]
    fn zero_drifts_within_three_standard_errors() {
        let mut p = maser_ensemble_params();
        p = EnsembleParams::new(
            p.clocks().iter().map(|c| ClockParams::new(c.q1, c.q2, 0.0)).collect(),
            p.r().clone(),
        )
        .unwrap();
        let model = EnsembleModel::assemble(&p, 5000.0).unwrap();
        let sys = system_for_model(&model, 5).unwrap();
        let rec = simulate_measurements(&model, 6312, 10, None).unwrap();
        let res = compute_residues(&rec, &sys).unwrap();
        let d = estimate_drifts_mdm(&res, &sys, 0.0).unwrap();
        for (v, se) in d.drifts.iter().zip(&d.std_errors) {
            assert!(v.abs() <= 3.0 * se, "{v} vs {se}");
        }
    }

    #[test]
    fn white_measurement_noise_toy() {
        let sigma2 = 4e-20;
        let p = EnsembleParams::from_r_upper(vec![ClockParams::new(0.0, 0.0, 0.0); 2], &[sigma2]).unwrap();
        let model = EnsembleModel::assemble(&p, 1.0).unwrap();
        let rec = simulate_measurements(&model, 100_000, 6, None).unwrap();
        let cfg = MdmConfig {
            l: 5,
            ts_target: 1.0,
            allow_rank_deficient: true,
        };
        let rep = estimate_mdm(&rec, &cfg, 0.0).unwrap();
        let idx = rep.theta.len() - 1;
        assert_eq!(rep.theta_labels[idx], "r[1,1]");
        assert_relative_eq!(rep.theta[idx], sigma2, max_relative = 0.03, epsilon = 0.0);
    }

    #[test]
    fn end_to_end_report() {
        let model = EnsembleModel::assemble(&maser_ensemble_params(), 5.0).unwrap();
        let rec = simulate_measurements(&model, 200_000, 9, None).unwrap();
        let a = estimate_mdm(&rec, &MdmConfig::default(), 0.0).unwrap();
        let b = estimate_mdm(&rec, &MdmConfig::default(), 0.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.theta.len(), 18);
        assert_eq!(a.method, Method::Mdm);
        assert_eq!(a.diagnostics.window, Some(5));
        assert_eq!(a.diagnostics.n_residue_dim, Some(9));
        assert_eq!(a.diagnostics.ts_target_s, Some(5000.0));
    }

    #[test]
    fn non_multiple_target_is_rejected() {
        let model = EnsembleModel::assemble(&maser_ensemble_params(), 5.0).unwrap();
        let rec = simulate_measurements(&model, 1000, 9, None).unwrap();
        let cfg = MdmConfig {
            ts_target: 12.5,
            ..MdmConfig::default()
        };
        assert!(matches!(estimate_mdm(&rec, &cfg, 0.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn two_clocks_with_l4_need_rank_deficient_mode() {
        let p = EnsembleParams::from_r_upper(
            vec![
                ClockParams::new(1e-27, 1e-35, 0.0),
                ClockParams::new(2e-27, 2e-35, 5e-21),
            ],
            &[1e-34],
        )
        .unwrap();
        let model = EnsembleModel::assemble(&p, 5000.0).unwrap();
        let rec = simulate_measurements(&model, 6000, 3, None).unwrap();
        let mut cfg = MdmConfig {
            l: 4,
            ..MdmConfig::default()
        };
        assert!(matches!(
            estimate_mdm(&rec, &cfg, 0.0),
            Err(Error::Unidentifiable { .. })
        ));
        cfg.allow_rank_deficient = true;
        let rep = estimate_mdm(&rec, &cfg, 0.0).unwrap();
        assert!(rep.diagnostics.rank_deficient);
        assert_eq!(rep.theta.len(), 7);
    }
}
