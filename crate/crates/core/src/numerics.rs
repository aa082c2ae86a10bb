//! Dense linear-algebra kernels shared by both identification methods.
//!
//! Everything here goes through an SVD of the (weighted, column-equilibrated)
//! design matrix; normal equations are never formed. The ACOV regression
//! matrix mixes columns scaling like `tau^-2` through `tau^2`, which puts
//! raw column norms more than twenty orders of magnitude apart.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Relative singular-value cutoff for [`pinv_solve`] and least-squares rank.
pub const PINV_RTOL: f64 = 1e-12;

/// Relative singular-value cutoff for [`left_null_space`] when building annihilators.
pub const NULL_SPACE_RTOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LsDiagnostics {
    pub residual_norm: f64,
    /// `sigma_max / sigma_min` of the (scaled) design matrix; infinite when singular.
    pub condition_number: f64,
    pub rank: usize,
    pub iterations: usize,
}

/// A thin SVD together with the rank decision taken at a relative tolerance.
#[derive(Debug, Clone)]
pub struct RankRevealing {
    a: DMatrix<f64>,
    u: DMatrix<f64>,
    singular: DVector<f64>,
    v_t: DMatrix<f64>,
    cutoff: f64,
    ncols: usize,
}

impl RankRevealing {
    pub fn new(a: &DMatrix<f64>, rtol: f64) -> Self {
        let ncols = a.ncols();
        if a.nrows() == 0 || ncols == 0 {
            return RankRevealing {
                a: a.clone(),
                u: DMatrix::zeros(a.nrows(), 0),
                singular: DVector::zeros(0),
                v_t: DMatrix::zeros(0, ncols),
                cutoff: 0.0,
                ncols,
            };
        }
        let svd = a.clone().svd(true, true);
        let singular = svd.singular_values;
        let smax = singular.iter().cloned().fold(0.0, f64::max);
        RankRevealing {
            a: a.clone(),
            u: svd.u.expect("u requested"),
            singular,
            v_t: svd.v_t.expect("v_t requested"),
            cutoff: rtol * smax,
            ncols,
        }
    }

    fn kept(&self) -> impl Iterator<Item = usize> + '_ {
        let cutoff = self.cutoff;
        self.singular
            .iter()
            .enumerate()
            .filter(move |(_, &s)| s > cutoff && s > 0.0)
            .map(|(i, _)| i)
    }

    pub fn rank(&self) -> usize {
        self.kept().count()
    }

    pub fn singular_values(&self) -> &DVector<f64> {
        &self.singular
    }

    pub fn condition_number(&self) -> f64 {
        let smax = self.singular.iter().cloned().fold(0.0, f64::max);
        if smax == 0.0 {
            return f64::INFINITY;
        }
        // Wide matrices have implicit zero singular values.
        if self.singular.len() < self.ncols {
            return f64::INFINITY;
        }
        let smin = self.singular.iter().cloned().fold(f64::INFINITY, f64::min);
        if smin == 0.0 {
            f64::INFINITY
        } else {
            smax / smin
        }
    }

    fn apply_pinv(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = DVector::zeros(self.ncols);
        for i in self.kept() {
            let coef = self.u.column(i).dot(b) / self.singular[i];
            x.axpy(coef, &self.v_t.row(i).transpose(), 1.0);
        }
        x
    }

    /// Minimum-norm least-squares solution over the retained singular triplets.
    ///
    /// The SVD occasionally reconstructs its input only to about `1e-10`
    /// relative accuracy, so two steps of iterative refinement follow.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = self.apply_pinv(b);
        for _ in 0..2 {
            let r = b - &self.a * &x;
            x += self.apply_pinv(&r);
        }
        x
    }

    /// `(A^T A)^+` restricted to the retained subspace.
    pub fn gram_pinv(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.ncols, self.ncols);
        for i in self.kept() {
            let v = self.v_t.row(i).transpose();
            out += (&v * v.transpose()) / (self.singular[i] * self.singular[i]);
        }
        out
    }

    /// Orthonormal basis (as columns) of the numerical null space.
    pub fn null_space(&self) -> DMatrix<f64> {
        let kept: Vec<usize> = self.kept().collect();
        let mut range = DMatrix::zeros(self.ncols, kept.len());
        for (c, &i) in kept.iter().enumerate() {
            range.set_column(c, &self.v_t.row(i).transpose());
        }
        orthogonal_complement(&range)
    }
}

/// Orthonormal columns spanning the complement of the orthonormal columns of `basis`.
fn orthogonal_complement(basis: &DMatrix<f64>) -> DMatrix<f64> {
    let dim = basis.nrows();
    let proj = DMatrix::identity(dim, dim) - basis * basis.transpose();
    let eig = SymmetricEigen::new(proj);
    let picked: Vec<usize> = (0..dim).filter(|&i| eig.eigenvalues[i] > 0.5).collect();
    let mut out = DMatrix::zeros(dim, picked.len());
    for (c, &i) in picked.iter().enumerate() {
        out.set_column(c, &eig.eigenvectors.column(i));
    }
    out
}

/// Result of [`weighted_least_squares`].
#[derive(Debug, Clone)]
pub struct WlsFit {
    pub x: DVector<f64>,
    pub diagnostics: LsDiagnostics,
    /// `(A^T W A)^+`, the parameter covariance when `w` holds inverse variances.
    pub covariance: DMatrix<f64>,
    /// Unit vectors (original parameter coordinates) the data cannot resolve.
    pub null_directions: Vec<DVector<f64>>,
}

impl WlsFit {
    pub fn is_rank_deficient(&self) -> bool {
        self.diagnostics.rank < self.x.len()
    }

    pub fn standard_errors(&self) -> DVector<f64> {
        self.covariance.diagonal().map(|v| v.max(0.0).sqrt())
    }
}

/// Minimizes `||W^{1/2} (b - A x)||^2` for diagonal positive weights `w`.
///
/// The weighted matrix is column-equilibrated before its SVD; when it is
/// rank deficient the returned `x` is the minimum-norm minimizer in the
/// equilibrated coordinates and `diagnostics.rank` reports the deficiency.
pub fn weighted_least_squares(a: &DMatrix<f64>, b: &DVector<f64>, w: &DVector<f64>) -> Result<WlsFit> {
    if a.nrows() != b.len() || a.nrows() != w.len() {
        return invalid(format!(
            "dimension mismatch: A is {}x{}, b has {}, w has {}",
            a.nrows(),
            a.ncols(),
            b.len(),
            w.len()
        ));
    }
    if let Some(bad) = w.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return invalid(format!("weights must be finite and positive, got {bad}"));
    }
    let sw = w.map(f64::sqrt);
    let mut aw = a.clone();
    for (mut row, s) in aw.row_iter_mut().zip(sw.iter()) {
        row *= *s;
    }
    let bw = b.component_mul(&sw);

    let scales: Vec<f64> = aw
        .column_iter()
        .map(|c| {
            let n = c.norm();
            if n > 0.0 && n.is_finite() {
                n
            } else {
                1.0
            }
        })
        .collect();
    let mut ae = aw.clone();
    for (mut col, s) in ae.column_iter_mut().zip(&scales) {
        col /= *s;
    }

    let rr = RankRevealing::new(&ae, PINV_RTOL);
    let y = rr.solve(&bw);
    let x = DVector::from_iterator(y.len(), y.iter().zip(&scales).map(|(v, s)| v / s));
    let resid = &bw - &aw * &x;

    let ge = rr.gram_pinv();
    let covariance = DMatrix::from_fn(ge.nrows(), ge.ncols(), |i, j| ge[(i, j)] / (scales[i] * scales[j]));

    let ns = rr.null_space();
    let null_directions = ns
        .column_iter()
        .map(|c| {
            let v = DVector::from_iterator(c.len(), c.iter().zip(&scales).map(|(v, s)| v / s));
            let n = v.norm();
            v / n
        })
        .collect();

    Ok(WlsFit {
        x,
        diagnostics: LsDiagnostics {
            residual_norm: resid.norm(),
            condition_number: rr.condition_number(),
            rank: rr.rank(),
            iterations: 0,
        },
        covariance,
        null_directions,
    })
}

/// Orthonormal rows spanning `{v : v^T M = 0}` at numerical rank `tol_rel * sigma_max`.
///
/// Returns a `0 x rows(M)` matrix when `M` has full row rank.
pub fn left_null_space(m: &DMatrix<f64>, tol_rel: f64) -> Result<DMatrix<f64>> {
    if m.iter().all(|v| *v == 0.0) {
        return invalid("left null space of an all-zero matrix");
    }
    let rr = RankRevealing::new(m, tol_rel);
    let kept: Vec<usize> = rr.kept().collect();
    let mut range = DMatrix::zeros(m.nrows(), kept.len());
    for (c, &i) in kept.iter().enumerate() {
        range.set_column(c, &rr.u.column(i));
    }
    Ok(orthogonal_complement(&range).transpose())
}

/// Numerical rank at `tol_rel * sigma_max`.
pub fn numerical_rank(m: &DMatrix<f64>, tol_rel: f64) -> usize {
    RankRevealing::new(m, tol_rel).rank()
}

/// Minimum-norm least-squares solution `A^+ b` with cutoff [`PINV_RTOL`].
///
/// # Panics
///
/// If `b.len() != A.nrows()`.
pub fn pinv_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    assert_eq!(a.nrows(), b.len(), "pinv_solve: rhs length mismatch");
    RankRevealing::new(a, PINV_RTOL).solve(b)
}

/// Damped Gauss–Newton for `min ||r(x)||^2`.
///
/// Each step solves `J dx = -r` in the least-squares sense and is halved (up
/// to 30 times) until the residual decreases. Stops once `||J^T r|| <= gtol`,
/// when no halving improves the residual, or after `max_iter` steps.
pub fn gauss_newton<R, J>(
    mut residual_fn: R,
    mut jacobian_fn: J,
    x0: DVector<f64>,
    max_iter: usize,
    gtol: f64,
) -> Result<(DVector<f64>, LsDiagnostics)>
where
    R: FnMut(&DVector<f64>) -> DVector<f64>,
    J: FnMut(&DVector<f64>) -> DMatrix<f64>,
{
    let mut x = x0;
    let mut r = residual_fn(&x);
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged("non-finite residual at the starting point".into()));
    }
    let mut cost = r.norm_squared();
    let mut iterations = 0;
    let mut jac = jacobian_fn(&x);
    while iterations < max_iter {
        let grad = jac.transpose() * &r;
        if grad.norm() <= gtol {
            break;
        }
        let step = pinv_solve(&jac, &(-&r));
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=30 {
            let trial = &x + alpha * &step;
            let rt = residual_fn(&trial);
            if rt.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged(format!(
                    "non-finite residual at iteration {}",
                    iterations + 1
                )));
            }
            let ct = rt.norm_squared();
            if ct < cost {
                accepted = Some((trial, rt, ct));
                break;
            }
            alpha *= 0.5;
        }
        let Some((xn, rn, cn)) = accepted else {
            break;
        };
        x = xn;
        r = rn;
        cost = cn;
        jac = jacobian_fn(&x);
        iterations += 1;
    }
    let rr = RankRevealing::new(&jac, PINV_RTOL);
    Ok((
        x,
        LsDiagnostics {
            residual_norm: cost.sqrt(),
            condition_number: rr.condition_number(),
            rank: rr.rank(),
            iterations,
        },
    ))
}

/// Lower-triangular `L` with `L L^T = A` for a symmetric positive semi-definite `A`.
///
/// A pivot below `-rtol * trace(A)` is an error. Pivots not exceeding
/// `rtol` times their original diagonal entry are clamped to zero and the
/// corresponding column is dropped.
pub fn semidefinite_cholesky(a: &DMatrix<f64>, rtol: f64) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return invalid("semidefinite_cholesky needs a square matrix");
    }
    let neg_tol = rtol * a.trace().abs();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut diag = a[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if diag < -neg_tol {
            return Err(Error::InvalidCovariance(format!(
                "matrix is not positive semi-definite (pivot {j} = {diag:e})"
            )));
        }
        if diag <= rtol * a[(j, j)].abs() {
            continue;
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    SymmetricEigen::new(a.clone())
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}
