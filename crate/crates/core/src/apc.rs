//! Principal-components factor estimation on a complete matrix, factor-count
//! selection, and a soft-thresholded variant.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{thin_svd, thin_svd_warm, Svd, RANK_TOL};

/// `X ≈ F Λᵀ` with `FᵀF/T = I_r` and `ΛᵀΛ` diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    /// `T × r`
    pub f: DMatrix<f64>,
    /// `N × r`
    pub lambda: DMatrix<f64>,
    /// Top-`r` singular values of `X / √(TN)`, descending.
    pub d: DVector<f64>,
    pub rank_deficient: bool,
}

impl FactorModel {
    pub fn r(&self) -> usize {
        self.d.len()
    }
    pub fn t(&self) -> usize {
        self.f.nrows()
    }
    pub fn n(&self) -> usize {
        self.lambda.nrows()
    }

    /// `F Λᵀ`, `T × N`.
    pub fn common(&self) -> DMatrix<f64> {
        &self.f * self.lambda.transpose()
    }

    pub fn common_at(&self, i: usize, t: usize) -> f64 {
        self.f.row(t).dot(&self.lambda.row(i))
    }
}

fn check_complete(x: &DMatrix<f64>) -> Result<()> {
    if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
        let (r, c) = (pos % x.nrows(), pos / x.nrows());
        if x[(r, c)].is_nan() {
            return Err(Error::MaskedInput(format!("missing entry at row {r}, column {c}")));
        }
        return Err(Error::InvalidInput(format!("non-finite entry at row {r}, column {c}")));
    }
    Ok(())
}

fn from_svd(svd: Svd, t: usize, n: usize) -> FactorModel {
    let r = svd.rank();
    let rank_deficient = svd.numerical_rank() < r;
    if rank_deficient {
        log::warn!("rank {r} requested but the matrix has numerical rank {}", svd.numerical_rank());
    }
    let f = svd.u * (t as f64).sqrt();
    let mut lambda = svd.v * (n as f64).sqrt();
    for (j, mut col) in lambda.column_iter_mut().enumerate() {
        col *= svd.d[j];
    }
    FactorModel { f, lambda, d: svd.d, rank_deficient }
}

/// `Z = X/√(TN)`, `F = √T·U_r`, `Λ = √N·V_r·D_r`.
pub fn estimate_apc(x: &DMatrix<f64>, r: usize) -> Result<FactorModel> {
    check_complete(x)?;
    let (t, n) = x.shape();
    let z = x / ((t * n) as f64).sqrt();
    Ok(from_svd(thin_svd(&z, r)?, t, n))
}

/// [`estimate_apc`] started from the subspace of a nearby fit of the same
/// shape, as in successive iterations of an imputation loop.
pub fn estimate_apc_warm(x: &DMatrix<f64>, r: usize, prev: &FactorModel) -> Result<FactorModel> {
    check_complete(x)?;
    let (t, n) = x.shape();
    if prev.t() != t || prev.n() != n || prev.r() != r {
        return estimate_apc(x, r);
    }
    let z = x / ((t * n) as f64).sqrt();
    let start = if t <= n { &prev.f } else { &prev.lambda };
    Ok(from_svd(thin_svd_warm(&z, r, start)?, t, n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum InfoCriterion {
    Icp1,
    #[default]
    Icp2,
    Icp3,
}

impl InfoCriterion {
    fn penalty(self, t: usize, n: usize) -> f64 {
        let (tf, nf) = (t as f64, n as f64);
        let c2 = tf.min(nf);
        match self {
            InfoCriterion::Icp1 => (nf + tf) / (nf * tf) * (nf * tf / (nf + tf)).ln(),
            InfoCriterion::Icp2 => (nf + tf) / (nf * tf) * c2.ln(),
            InfoCriterion::Icp3 => c2.ln() / c2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankSelection {
    pub r: usize,
    /// `IC(k)` for `k = 1..=r_max`; `-∞` where `V(k)` vanishes.
    pub criteria: Vec<f64>,
}

/// Factor count minimizing the ICp2 criterion over `1..=r_max`.
pub fn select_r(x: &DMatrix<f64>, r_max: usize) -> Result<usize> {
    Ok(select_r_with(x, r_max, InfoCriterion::Icp2)?.r)
}

/// `IC(k) = log V(k) + k·penalty`, `V(k) = ‖X − F_kΛ_kᵀ‖²/(NT)`. Ties go to the
/// smaller `k`; an exact fit at some `k` returns the smallest such `k`.
pub fn select_r_with(x: &DMatrix<f64>, r_max: usize, crit: InfoCriterion) -> Result<RankSelection> {
    check_complete(x)?;
    let (t, n) = x.shape();
    let max = t.min(n) / 2;
    if r_max == 0 || r_max > max {
        return Err(Error::RankError { requested: r_max, max });
    }
    let z = x / ((t * n) as f64).sqrt();
    let total = z.norm_squared();
    let svd = thin_svd(&z, r_max)?;
    let pen = crit.penalty(t, n);

    let mut criteria = Vec::with_capacity(r_max);
    let mut explained = 0.0;
    let mut exact = None;
    for k in 1..=r_max {
        explained += svd.d[k - 1] * svd.d[k - 1];
        let v = total - explained;
        if v <= RANK_TOL * RANK_TOL * total.max(f64::MIN_POSITIVE) {
            criteria.push(f64::NEG_INFINITY);
            exact.get_or_insert(k);
        } else {
            criteria.push(v.ln() + k as f64 * pen);
        }
    }
    let r = match exact {
        Some(k) => k,
        None => {
            let mut best = 0;
            for k in 1..criteria.len() {
                if criteria[k] < criteria[best] {
                    best = k;
                }
            }
            best + 1
        }
    };
    Ok(RankSelection { r, criteria })
}

/// Soft-thresholded principal components: singular values of `Z` shrink to
/// `D_γ = (D − γ)₊`, and the model is scaled so that
/// `F̂Λ̂ᵀ = √(TN)·U·diag(D_γ)·Vᵀ`, with `F̂ = F̃·D_γ^{1/2}` and
/// `Λ̂ = Λ̃·D⁻¹·D_γ^{1/2}`. Components shrunk to zero are dropped.
///
/// `gamma = 0` returns [`estimate_apc`] unchanged.
pub fn soft_threshold_apc(x: &DMatrix<f64>, r: usize, gamma: f64) -> Result<FactorModel> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidInput(format!("threshold must be a non-negative number, got {gamma}")));
    }
    let base = estimate_apc(x, r)?;
    if gamma == 0.0 {
        return Ok(base);
    }
    if gamma >= base.d[0] {
        return Err(Error::InvalidInput(format!(
            "threshold {gamma} removes every component (largest singular value {})",
            base.d[0]
        )));
    }
    let keep = base.d.iter().take_while(|&&d| d - gamma > 0.0).count();
    if keep < r {
        log::warn!("soft threshold {gamma} leaves {keep} of {r} components");
    }
    let mut f = base.f.columns(0, keep).into_owned();
    let mut lambda = base.lambda.columns(0, keep).into_owned();
    let mut d = DVector::zeros(keep);
    for j in 0..keep {
        let dg = base.d[j] - gamma;
        d[j] = dg;
        f.column_mut(j).scale_mut(dg.sqrt());
        lambda.column_mut(j).scale_mut(dg.sqrt() / base.d[j]);
    }
    Ok(FactorModel { f, lambda, d, rank_deficient: base.rank_deficient || keep < r })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rank2_6x4() -> DMatrix<f64> {
        let f = DMatrix::from_row_slice(6, 2, &[1.0, 0.5, -0.3, 1.2, 2.0, -0.7, 0.4, 0.9, -1.1, -0.2, 0.6, 1.5]);
        let l = DMatrix::from_row_slice(4, 2, &[0.8, -1.0, 1.3, 0.2, -0.5, 0.7, 0.9, 1.1]);
        f * l.transpose()
    }

    #[test]
    fn exact_rank_one() {
        let x = DMatrix::from_row_slice(2, 2, &[2.0, 2.0, -2.0, -2.0]);
        let m = estimate_apc(&x, 1).unwrap();
        assert_abs_diff_eq!(m.common(), x, epsilon = 1e-12);
        assert_abs_diff_eq!((m.f.transpose() * &m.f)[(0, 0)] / 2.0, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_matrix_is_flagged() {
        let m = estimate_apc(&DMatrix::zeros(4, 3), 1).unwrap();
        assert!(m.rank_deficient);
        assert_abs_diff_eq!(m.common(), DMatrix::zeros(4, 3), epsilon = 1e-15);
    }

    #[test]
    fn rank_two_reconstruction_and_normalization() {
        let x = rank2_6x4();
        let m = estimate_apc(&x, 2).unwrap();
        assert!((m.common() - &x).norm() / x.norm() <= 1e-10);
        assert_abs_diff_eq!(m.f.transpose() * &m.f / 6.0, DMatrix::identity(2, 2), epsilon = 1e-10);
        let ll = m.lambda.transpose() * &m.lambda;
        assert!(ll[(0, 1)].abs() <= 1e-8 * ll[(0, 0)]);
    }

    #[test]
    fn missing_entries_rejected() {
        let mut x = rank2_6x4();
        x[(2, 1)] = f64::NAN;
        assert!(matches!(estimate_apc(&x, 1), Err(Error::MaskedInput(_))));
    }

    #[test]
    fn selects_exact_rank() {
        let f = DMatrix::from_fn(30, 2, |t, j| ((t * 7 + j * 3) as f64).sin());
        let l = DMatrix::from_fn(20, 2, |i, j| ((i * 5 + j * 11) as f64).cos());
        let x = f * l.transpose();
        assert_eq!(select_r(&x, 6).unwrap(), 2);
        assert!(matches!(select_r(&x, 11), Err(Error::RankError { .. })));
    }

    #[test]
    fn soft_threshold_zero_is_identity() {
        let x = rank2_6x4();
        assert_eq!(soft_threshold_apc(&x, 2, 0.0).unwrap(), estimate_apc(&x, 2).unwrap());
    }

    #[test]
    fn soft_threshold_halves_rank_one() {
        let u = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let v = DVector::from_vec(vec![0.5, 1.0]);
        let x = &u * v.transpose();
        let d = estimate_apc(&x, 1).unwrap().d[0];
        let m = soft_threshold_apc(&x, 1, d / 2.0).unwrap();
        assert_abs_diff_eq!(m.common(), &x / 2.0, epsilon = 1e-12);
        assert!(soft_threshold_apc(&x, 1, d * 1.5).is_err());
    }
}
