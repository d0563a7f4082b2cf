//! Dense linear-algebra kernels shared by every estimator.
//!
//! The thin SVD is computed from the eigendecomposition of the smaller Gram
//! matrix (`A Aᵀ` when `T ≤ N`, else `Aᵀ A`). Panels here are at most a few
//! hundred on the short side, so the `O(min(T, N)³)` eigensolve dominates and
//! stays cheap. The symmetric eigensolver itself is faer's.

use faer::Side;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Singular values at or below this fraction of the largest are treated as zero.
/// Singular values come from a Gram eigendecomposition, so round-off leaves
/// null directions near `√ε·d₁` rather than `ε·d₁`.
pub const RANK_TOL: f64 = 1e-7;

/// Below this fraction of `d₁` a singular value has no usable far-side vector.
const DEGENERATE_TOL: f64 = 1e-12;

/// Designs whose Gram matrix has a larger condition number are rejected by [`ols`].
pub const MAX_DESIGN_CONDITION: f64 = 1e12;

/// Top-`k` singular triplets `A ≈ U diag(D) Vᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Svd {
    /// `T × k`, orthonormal columns.
    pub u: DMatrix<f64>,
    /// `k` singular values, descending, non-negative.
    pub d: DVector<f64>,
    /// `N × k`, orthonormal columns.
    pub v: DMatrix<f64>,
}

impl Svd {
    pub fn rank(&self) -> usize {
        self.d.len()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut ud = self.u.clone();
        for (j, mut col) in ud.column_iter_mut().enumerate() {
            col *= self.d[j];
        }
        ud * self.v.transpose()
    }

    /// Number of singular values above `RANK_TOL · d₁`.
    pub fn numerical_rank(&self) -> usize {
        let top = self.d.get(0).copied().unwrap_or(0.0);
        if top <= 0.0 {
            return 0;
        }
        self.d.iter().filter(|&&s| s > RANK_TOL * top).count()
    }
}

pub fn ensure_finite(a: &DMatrix<f64>, what: &str) -> Result<()> {
    if let Some(pos) = a.iter().position(|v| !v.is_finite()) {
        let (r, c) = (pos % a.nrows(), pos / a.nrows());
        return Err(Error::InvalidInput(format!("{what} has a non-finite entry at row {r}, column {c}")));
    }
    Ok(())
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues in descending
/// order. Equal eigenvalues keep the order the solver produced them in.
pub fn sym_eigen_desc(g: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = g.nrows();
    let fm = faer::Mat::<f64>::from_fn(n, n, |i, j| g[(i, j)]);
    let eig = fm.selfadjoint_eigendecomposition(Side::Lower);
    let s = eig.s().column_vector();
    let u = eig.u();

    let mut order: Vec<usize> = (0..n).collect();
    // stable: ties keep solver order
    order.sort_by(|&a, &b| s.read(b).total_cmp(&s.read(a)));

    let values = DVector::from_iterator(n, order.iter().map(|&j| s.read(j)));
    let vectors = DMatrix::from_fn(n, n, |i, c| u.read(i, order[c]));
    (values, vectors)
}

/// Top-`k` singular triplets of `a`, sign-normalized.
pub fn thin_svd(a: &DMatrix<f64>, k: usize) -> Result<Svd> {
    ensure_finite(a, "matrix")?;
    let (t, n) = a.shape();
    let max = t.min(n);
    if k == 0 || k > max {
        return Err(Error::RankError { requested: k, max });
    }

    let wide = t <= n;
    let gram = if wide { a * a.transpose() } else { a.transpose() * a };
    let (vals, vecs) = sym_eigen_desc(&gram);

    let d = DVector::from_iterator(k, vals.iter().take(k).map(|&l| l.max(0.0).sqrt()));
    let near = vecs.columns(0, k).into_owned();
    Ok(from_near_side(a, wide, d, near))
}

/// Complete an SVD from the singular vectors on the shorter side.
fn from_near_side(a: &DMatrix<f64>, wide: bool, d: DVector<f64>, near: DMatrix<f64>) -> Svd {
    let k = d.len();
    let top = d[0];

    // The far side follows from the near side: v_j = Aᵀu_j / d_j (or u_j = A v_j / d_j).
    let mut far = if wide { a.transpose() * &near } else { a * &near };
    let mut degenerate = Vec::new();
    for j in 0..k {
        if top > 0.0 && d[j] > DEGENERATE_TOL * top {
            let mut col = far.column_mut(j);
            col /= d[j];
        } else {
            degenerate.push(j);
        }
    }
    if !degenerate.is_empty() {
        complete_orthonormal(&mut far, &degenerate);
    }

    let (u, v) = if wide { (near, far) } else { (far, near) };
    sign_normalize(Svd { u, d, v })
}

/// Residual tolerance of [`thin_svd_warm`], relative to the top eigenvalue of the Gram matrix.
pub const SUBSPACE_TOL: f64 = 1e-13;
const SUBSPACE_MAX_ITER: usize = 200;

/// [`thin_svd`] by subspace iteration from `start`, a guess of the top-`k`
/// singular vectors on the shorter side of `a` (`U` if `a` has no more rows
/// than columns, `V` otherwise).
///
/// Iterates until every Ritz pair of the Gram operator has residual below
/// `SUBSPACE_TOL · λ₁`, which is far inside the accuracy of the direct solver
/// when the top `k` eigenvalues are separated from the rest. Falls back to
/// [`thin_svd`] when the start is unusable or the iteration stalls.
pub fn thin_svd_warm(a: &DMatrix<f64>, k: usize, start: &DMatrix<f64>) -> Result<Svd> {
    let (t, n) = a.shape();
    let wide = t <= n;
    let m = t.min(n);
    if k == 0 || k > m || start.shape() != (m, k) || !start.iter().all(|v| v.is_finite()) {
        return thin_svd(a, k);
    }
    ensure_finite(a, "matrix")?;
    let op = |q: &DMatrix<f64>| if wide { a * (a.transpose() * q) } else { a.transpose() * (a * q) };

    let mut q = start.clone().qr().q();
    for _ in 0..SUBSPACE_MAX_ITER {
        let w = op(&q);
        let (theta, s) = sym_eigen_desc(&(q.transpose() * &w));
        if !(theta[0] > 0.0) || theta[k - 1] <= RANK_TOL * RANK_TOL * theta[0] {
            break;
        }
        let y = &q * &s;
        let ws = &w * &s;
        let converged = (0..k).all(|j| (ws.column(j) - y.column(j) * theta[j]).norm() <= SUBSPACE_TOL * theta[0]);
        if converged {
            let d = theta.map(|l| l.max(0.0).sqrt());
            return Ok(from_near_side(a, wide, d, y));
        }
        q = ws.qr().q();
    }
    thin_svd(a, k)
}

/// Replace the listed columns with unit vectors orthogonal to every other
/// column, drawn deterministically from the standard basis.
fn complete_orthonormal(m: &mut DMatrix<f64>, cols: &[usize]) {
    let (rows, k) = m.shape();
    let mut settled: Vec<usize> = (0..k).filter(|j| !cols.contains(j)).collect();
    let mut basis = 0;
    for &j in cols {
        loop {
            assert!(basis < rows, "cannot complete {k} orthonormal columns in dimension {rows}");
            let mut cand = DVector::<f64>::zeros(rows);
            cand[basis] = 1.0;
            basis += 1;
            for &s in &settled {
                let proj = m.column(s).dot(&cand);
                cand -= m.column(s) * proj;
            }
            let norm = cand.norm();
            if norm > 0.5 {
                m.set_column(j, &(cand / norm));
                settled.push(j);
                break;
            }
        }
    }
}

/// Flip each singular pair so the largest-magnitude entry of `u_j` (first one
/// on ties) is positive. Leaves `U diag(D) Vᵀ` unchanged.
pub fn sign_normalize(mut svd: Svd) -> Svd {
    for j in 0..svd.u.ncols() {
        let col = svd.u.column(j);
        let mut best = 0;
        for i in 1..col.len() {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if !col.is_empty() && col[best] < 0.0 {
            svd.u.column_mut(j).neg_mut();
            svd.v.column_mut(j).neg_mut();
        }
    }
    svd
}

/// Least squares `B = (XᵀX)⁻¹XᵀY` for every column of `y` at once.
///
/// Solved through a QR factorization of `x`; the normal matrix is only used to
/// reject ill-conditioned designs.
pub fn ols(y: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, q) = x.shape();
    if y.nrows() != n {
        return Err(Error::InvalidInput(format!("response has {} rows but design has {n}", y.nrows())));
    }
    if n < q || q == 0 {
        return Err(Error::SingularDesign(format!("{n} observations cannot identify {q} coefficients")));
    }
    let cond = sym_condition_number(&(x.transpose() * x));
    if !(cond < MAX_DESIGN_CONDITION) {
        return Err(Error::SingularDesign(format!("design Gram matrix condition number {cond:.3e}")));
    }
    let qr = x.clone().qr();
    let qty = qr.q().transpose() * y;
    qr.r().solve_upper_triangular(&qty).ok_or_else(|| Error::SingularDesign("triangular factor is singular".into()))
}

/// Condition number of a symmetric PSD matrix (∞ if singular).
pub fn sym_condition_number(g: &DMatrix<f64>) -> f64 {
    let ev = g.clone().symmetric_eigenvalues();
    let max = ev.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = ev.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Inverse of a small symmetric positive-definite matrix.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    sym.cholesky().map(|c| c.inverse())
}

/// `aᵀ M a` for a vector `a`.
pub fn quad_form(a: &DVector<f64>, m: &DMatrix<f64>) -> f64 {
    (a.transpose() * m * a)[(0, 0)]
}
