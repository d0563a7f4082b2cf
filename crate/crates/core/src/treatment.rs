//! Treatment effects on the treated by tall-wide imputation of untreated
//! potential outcomes.
//!
//! Controls are observed in every period and treated units up to `T_0`, so
//! the untreated outcomes of treated units after `T_0` form the MISS block of
//! a panel whose TALL block is the controls and whose WIDE block is the
//! pre-treatment periods. Covariate effects are removed first by an
//! interactive-fixed-effects regression on the controls.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::apc::{estimate_apc, FactorModel};
use crate::error::{Error, Result};
use crate::normal::two_sided_z;
use crate::numerics::{ols, quad_form, spd_inverse};
use crate::panel::{BlockPartition, Panel};
use crate::refit::{infer, InferenceOptions, Regime, VarianceComponents};
use crate::tw::{impute_tw_with, RankChoice, TwOptions};

pub const DEFAULT_IFE_TOL: f64 = 1e-8;
pub const DEFAULT_IFE_MAX_ITER: usize = 1000;

/// Outcomes, covariates and a common adoption date. Units are stored in input
/// order; `treated[i]` marks the treated ones.
#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentPanel {
    /// `T × N`: `Y(0)` for controls and for treated units up to `T_0`,
    /// `Y(1)` for treated units after.
    pub y: DMatrix<f64>,
    /// `K` matrices, each `T × N`.
    pub covariates: Vec<DMatrix<f64>>,
    pub treated: Vec<bool>,
    pub t0: usize,
    pub unit_ids: Vec<String>,
    pub period_ids: Vec<String>,
}

impl TreatmentPanel {
    pub fn new(
        y: DMatrix<f64>,
        covariates: Vec<DMatrix<f64>>,
        treated: Vec<bool>,
        t0: usize,
        unit_ids: Vec<String>,
        period_ids: Vec<String>,
    ) -> Result<Self> {
        let (t, n) = y.shape();
        if treated.len() != n || unit_ids.len() != n || period_ids.len() != t {
            return Err(Error::InvalidInput("assignment or ids do not match the outcome panel".into()));
        }
        if t0 == 0 || t0 >= t {
            return Err(Error::InvalidInput(format!("T_0 = {t0} must lie in 1..{t}")));
        }
        let n1 = treated.iter().filter(|&&d| d).count();
        if n1 == 0 || n1 == n {
            return Err(Error::InvalidInput(format!("need both treated and control units, got {n1} of {n} treated")));
        }
        for i in 0..n {
            for tt in 0..t {
                if !y[(tt, i)].is_finite() {
                    let what = if treated[i] && tt < t0 {
                        "; every treated unit must share the same adoption date"
                    } else {
                        ""
                    };
                    return Err(Error::InvalidInput(format!(
                        "outcome of `{}` at `{}` is missing or not finite{what}",
                        unit_ids[i], period_ids[tt]
                    )));
                }
            }
        }
        for (k, x) in covariates.iter().enumerate() {
            if x.shape() != (t, n) {
                return Err(Error::InvalidInput(format!("covariate {k} is {:?}, expected {:?}", x.shape(), (t, n))));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("covariate {k} has non-finite values")));
            }
        }
        Ok(Self { y, covariates, treated, t0, unit_ids, period_ids })
    }

    /// Panel with generated ids.
    pub fn unlabeled(y: DMatrix<f64>, covariates: Vec<DMatrix<f64>>, treated: Vec<bool>, t0: usize) -> Result<Self> {
        let units = (1..=y.ncols()).map(|i| format!("u{i}")).collect();
        let periods = (1..=y.nrows()).map(|t| t.to_string()).collect();
        Self::new(y, covariates, treated, t0, units, periods)
    }

    pub fn t(&self) -> usize {
        self.y.nrows()
    }
    pub fn n(&self) -> usize {
        self.y.ncols()
    }
    pub fn k(&self) -> usize {
        self.covariates.len()
    }
    pub fn t1(&self) -> usize {
        self.t() - self.t0
    }
    pub fn controls(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| !self.treated[i]).collect()
    }
    pub fn treated_units(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.treated[i]).collect()
    }

    fn xb(&self, beta: &DVector<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.t(), self.n());
        for (k, x) in self.covariates.iter().enumerate() {
            out += x * beta[k];
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IfeFit {
    pub beta: DVector<f64>,
    /// Rank-`r` fit of `Y − Xβ̂` on the controls (`T × N_0`).
    pub model: FactorModel,
    pub iterations: usize,
    pub converged: bool,
}

fn columns(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), idx.len(), |t, k| m[(t, idx[k])])
}

/// Interactive fixed effects on the controls: alternate pooled OLS of
/// `Y − Ĉ` on the covariates with a rank-`r` principal-components fit of
/// `Y − Xβ̂`, starting from `Ĉ = 0`, until `‖Δβ̂‖ < tol`.
pub fn estimate_ife_beta(tp: &TreatmentPanel, r: usize, tol: f64, max_iter: usize) -> Result<IfeFit> {
    let ctrl = tp.controls();
    let yc = columns(&tp.y, &ctrl);
    let k = tp.k();
    if k == 0 {
        let model = estimate_apc(&yc, r)?;
        return Ok(IfeFit { beta: DVector::zeros(0), model, iterations: 0, converged: true });
    }
    let xs: Vec<DMatrix<f64>> = tp.covariates.iter().map(|x| columns(x, &ctrl)).collect();
    let cells = yc.len();
    let design = DMatrix::from_fn(cells, k, |c, j| xs[j].as_slice()[c]);

    let mut common = DMatrix::zeros(yc.nrows(), yc.ncols());
    let mut beta = DVector::zeros(k);
    let mut model = None;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let target = DMatrix::from_column_slice(cells, 1, (&yc - &common).as_slice());
        let next = DVector::from_column_slice(ols(&target, &design)?.as_slice());
        let mut resid = yc.clone();
        for (j, x) in xs.iter().enumerate() {
            resid -= x * next[j];
        }
        let fm = estimate_apc(&resid, r)?;
        common = fm.common();
        let step = (&next - &beta).norm();
        beta = next;
        model = Some(fm);
        if step < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("interactive fixed effects stopped after {iterations} iterations without converging");
    }
    Ok(IfeFit { beta, model: model.expect("at least one iteration"), iterations, converged })
}

/// `Σ ê² / (T·N_0 − r(T + N_0) + r² − K)` over `T × N_0` control residuals.
pub fn sigma_e_hat(residuals: &DMatrix<f64>, r: usize, k: usize) -> Result<f64> {
    let (t, n0) = (residuals.nrows() as i64, residuals.ncols() as i64);
    let (r, k) = (r as i64, k as i64);
    let dof = t * n0 - r * (t + n0) + r * r - k;
    if dof <= 0 {
        return Err(Error::DegenerateDof(dof));
    }
    Ok(residuals.norm_squared() / dof as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttOptions {
    pub rank: RankChoice,
    /// Use the refitted common component (otherwise the tall-wide one).
    pub refit: bool,
    pub level: f64,
    pub stationary: bool,
    pub hac_lags: usize,
    /// Add treated units' pre-treatment residuals to the `σ̂_e²` sum.
    pub sigma_with_treated_pre: bool,
    pub ife_tol: f64,
    pub ife_max_iter: usize,
}

impl Default for AttOptions {
    fn default() -> Self {
        Self {
            rank: RankChoice::Fixed(1),
            refit: true,
            level: 0.95,
            stationary: false,
            hac_lags: 0,
            sigma_with_treated_pre: false,
            ife_tol: DEFAULT_IFE_TOL,
            ife_max_iter: DEFAULT_IFE_MAX_ITER,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl Estimate {
    fn new(value: f64, se2: f64, z: f64) -> Self {
        let se = se2.max(0.0).sqrt();
        Self { value, se, ci_low: value - z * se, ci_high: value + z * se }
    }
}

/// Estimated effects. Treated units are indexed `0..N_1` in input order,
/// post-treatment periods `0..T_1` (period `T_0 + s`).
#[derive(Debug, Clone)]
pub struct TreatmentResult {
    /// `T_1 × N_1`
    pub theta_it: DMatrix<Estimate>,
    pub theta_t: Vec<Estimate>,
    pub theta_j: Vec<Estimate>,
    pub beta_hat: DVector<f64>,
    pub sigma_e2_hat: f64,
    /// Imputed `Ĉ` on the treated post-treatment cells, `T_1 × N_1`.
    pub c_hat_miss: DMatrix<f64>,
    /// Original indices of treated units.
    pub treated_units: Vec<usize>,
    pub t0: usize,
    pub r: usize,
    pub ife_converged: bool,
    pub level: f64,
    ctx: AttContext,
}

/// Everything the variance formulas need, in controls-first order.
#[derive(Debug, Clone)]
struct AttContext {
    vc: VarianceComponents,
    n0: usize,
    n1: usize,
    t0: usize,
    sigma_e2: f64,
    /// Control residuals at each period.
    ctrl_resid: DMatrix<f64>,
}

impl AttContext {
    fn sigma_l_inv(&self) -> Result<DMatrix<f64>> {
        spd_inverse(&self.vc.sigma_lambda).ok_or_else(|| Error::SingularSubBlock("loading second moment".into()))
    }
    fn sigma_f_inv(&self) -> Result<DMatrix<f64>> {
        spd_inverse(&self.vc.sigma_f).ok_or_else(|| Error::SingularSubBlock("factor second moment".into()))
    }

    fn gamma(&self, t: usize, stationary: bool) -> DMatrix<f64> {
        if stationary {
            self.vc.gamma[t].clone()
        } else {
            &self.vc.b_lambda * &self.vc.gamma_o[t] * self.vc.b_lambda.transpose()
        }
    }

    fn phi(&self, j: usize, stationary: bool) -> DMatrix<f64> {
        if stationary {
            self.vc.phi[j].clone()
        } else {
            &self.vc.b_f * &self.vc.phi_o[j] * self.vc.b_f.transpose()
        }
    }

    /// `se²(θ̂_t) = Λ̄ᵀS⁻¹ΓS⁻¹Λ̄ / N_0 + σ̂_e² / N_1` at panel period `t`.
    fn att_se2(&self, t: usize, stationary: bool) -> Result<f64> {
        let s = self.sigma_l_inv()?;
        let lam_bar = self.vc.lambda.rows(self.n0, self.n1).row_mean().transpose();
        let v = quad_form(&lam_bar, &(&s * self.gamma(t, stationary) * &s));
        Ok(v / self.n0 as f64 + self.sigma_e2 / self.n1 as f64)
    }

    /// `σ̂²(θ̂_jt)` for treated position `j` (controls-first index `n0 + j`).
    fn individual_se2(&self, j: usize, t: usize, stationary: bool) -> Result<f64> {
        let col = self.n0 + j;
        let sf = self.sigma_f_inv()?;
        let sl = self.sigma_l_inv()?;
        let ft = self.vc.f.row(t).transpose();
        let lj = self.vc.lambda.row(col).transpose();
        let w = quad_form(&ft, &(&sf * self.phi(col, stationary) * &sf));
        let v = quad_form(&lj, &(&sl * self.gamma(t, stationary) * &sl));
        let sig_et = self.ctrl_resid.row(t).norm_squared() / self.n0 as f64;
        Ok(w / self.t0 as f64 + v / self.n0 as f64 + sig_et)
    }

    /// `se²(θ̂_j) = F̄ᵀS_F⁻¹ΦS_F⁻¹F̄ / T_0 + σ̂²_ej / T_1`.
    fn unit_se2(&self, j: usize, stationary: bool) -> Result<f64> {
        let col = self.n0 + j;
        let t = self.vc.f.nrows();
        let t1 = t - self.t0;
        let sf = self.sigma_f_inv()?;
        let f_bar = self.vc.f.rows(self.t0, t1).row_mean().transpose();
        let w = quad_form(&f_bar, &(&sf * self.phi(col, stationary) * &sf));
        let pre = self.vc.residuals.view((0, col), (self.t0, 1));
        let sig_ej = pre.norm_squared() / self.t0 as f64;
        Ok(w / self.t0 as f64 + sig_ej / t1 as f64)
    }
}

impl TreatmentResult {
    fn z(&self) -> f64 {
        two_sided_z(self.level)
    }

    pub fn n0(&self) -> usize {
        self.ctx.n0
    }
    pub fn n1(&self) -> usize {
        self.ctx.n1
    }

    /// `𝕍̂_θ,t` and interval for `θ̂_t` at post-treatment step `s` (period
    /// `T_0 + s`), with rate `δ = min(√N_0, √N_1)`.
    pub fn att_variance_t(&self, s: usize, stationary: bool) -> Result<(f64, Estimate)> {
        let se2 = self.ctx.att_se2(self.t0 + s, stationary)?;
        let delta2 = self.ctx.n0.min(self.ctx.n1) as f64;
        Ok((delta2 * se2, Estimate::new(self.theta_t[s].value, se2, self.z())))
    }

    /// `σ̂²(θ̂_jt)` and interval for treated unit `j` at step `s`.
    pub fn individual_effect_inference(&self, j: usize, s: usize, stationary: bool) -> Result<(f64, Estimate)> {
        let se2 = self.ctx.individual_se2(j, self.t0 + s, stationary)?;
        Ok((se2, Estimate::new(self.theta_it[(s, j)].value, se2, self.z())))
    }

    /// Contribution of the idiosyncratic term to `σ̂²(θ̂_jt)`.
    pub fn individual_noise_share(&self, j: usize, s: usize, stationary: bool) -> Result<f64> {
        let t = self.t0 + s;
        let total = self.ctx.individual_se2(j, t, stationary)?;
        let noise = self.ctx.ctrl_resid.row(t).norm_squared() / self.ctx.n0 as f64;
        Ok(if total > 0.0 { noise / total } else { 0.0 })
    }

    /// `𝕍̂_θ̂j` and interval for the time-averaged effect on treated unit `j`,
    /// with rate `δ = min(√T_0, √T_1)`.
    pub fn unit_average_effect_inference(&self, j: usize, stationary: bool) -> Result<(f64, Estimate)> {
        let t1 = self.theta_t.len();
        if t1 < 2 {
            return Err(Error::InsufficientData("unit averages need at least two treated periods".into()));
        }
        let se2 = self.ctx.unit_se2(j, stationary)?;
        let delta2 = self.t0.min(t1) as f64;
        Ok((delta2 * se2, Estimate::new(self.theta_j[j].value, se2, self.z())))
    }
}

/// Interactive fixed effects for `β̂`, tall-wide imputation of the
/// covariate-adjusted outcomes, then effects and their standard errors.
pub fn att_tw(tp: &TreatmentPanel, opts: &AttOptions) -> Result<TreatmentResult> {
    let (t, n, t0) = (tp.t(), tp.n(), tp.t0);
    let ctrl = tp.controls();
    let trt = tp.treated_units();
    let (n0, n1) = (ctrl.len(), trt.len());
    let order: Vec<usize> = ctrl.iter().chain(trt.iter()).copied().collect();

    // controls first, so the partition is the identity with (T_0, N_0)
    let y = columns(&tp.y, &order);
    let reordered = TreatmentPanel {
        y: y.clone(),
        covariates: tp.covariates.iter().map(|x| columns(x, &order)).collect(),
        treated: order.iter().map(|&i| tp.treated[i]).collect(),
        t0,
        unit_ids: order.iter().map(|&i| tp.unit_ids[i].clone()).collect(),
        period_ids: tp.period_ids.clone(),
    };

    let r_ife = match opts.rank {
        RankChoice::Fixed(r) => r,
        RankChoice::Auto { r_max, criterion } => {
            let yc = columns(&y, &(0..n0).collect::<Vec<_>>());
            let cap = r_max.min(yc.nrows().min(yc.ncols()) / 2);
            crate::apc::select_r_with(&yc, cap.max(1), criterion)?.r
        }
    };
    let ife = estimate_ife_beta(&reordered, r_ife, opts.ife_tol, opts.ife_max_iter)?;
    let xb = reordered.xb(&ife.beta);
    let resid = &y - &xb;

    let mask = DMatrix::from_fn(t, n, |tt, i| i < n0 || tt < t0);
    let panel = Panel::with_mask(resid.clone(), mask)?;
    let bp = BlockPartition::from_parts((0..t).collect(), (0..n).collect(), t0, n0)?;
    let tw = impute_tw_with(&panel, &bp, &TwOptions { rank: opts.rank, estimator: Default::default() })?;
    let r = tw.estimate.r;
    let regime = if opts.refit { Regime::Refit } else { Regime::TallWide };
    let inf_opts = InferenceOptions { level: opts.level, regime, stationary: opts.stationary };
    let out = infer(&tw.imputed, r, opts.hac_lags, &inf_opts)?;
    let c_hat = &out.imputed.c_tilde;

    let ctrl_resid = DMatrix::from_fn(t, n0, |tt, i| resid[(tt, i)] - c_hat[(tt, i)]);
    let sigma_e2 = if opts.sigma_with_treated_pre {
        // extra cells add to both the sum and the degrees of freedom
        let mut sum = ctrl_resid.norm_squared();
        for i in n0..n {
            for tt in 0..t0 {
                sum += (resid[(tt, i)] - c_hat[(tt, i)]).powi(2);
            }
        }
        let dof = (t * n0 + n1 * t0) as i64 - (r * (t + n0)) as i64 + (r * r) as i64 - tp.k() as i64;
        if dof <= 0 {
            return Err(Error::DegenerateDof(dof));
        }
        sum / dof as f64
    } else {
        sigma_e_hat(&ctrl_resid, r, tp.k())?
    };

    let t1 = t - t0;
    let ctx = AttContext { vc: out.components, n0, n1, t0, sigma_e2, ctrl_resid };
    let z = two_sided_z(opts.level);

    let theta = DMatrix::from_fn(t1, n1, |s, j| y[(t0 + s, n0 + j)] - xb[(t0 + s, n0 + j)] - c_hat[(t0 + s, n0 + j)]);
    let c_hat_miss = DMatrix::from_fn(t1, n1, |s, j| c_hat[(t0 + s, n0 + j)]);

    let mut theta_it = Vec::with_capacity(t1 * n1);
    for j in 0..n1 {
        for s in 0..t1 {
            let se2 = ctx.individual_se2(j, t0 + s, opts.stationary)?;
            theta_it.push(Estimate::new(theta[(s, j)], se2, z));
        }
    }
    let theta_it = DMatrix::from_vec(t1, n1, theta_it);
    let mut theta_t = Vec::with_capacity(t1);
    for s in 0..t1 {
        let value = theta.row(s).mean();
        theta_t.push(Estimate::new(value, ctx.att_se2(t0 + s, opts.stationary)?, z));
    }
    let mut theta_j = Vec::with_capacity(n1);
    for j in 0..n1 {
        let value = theta.column(j).mean();
        let se2 = if t1 >= 2 { ctx.unit_se2(j, opts.stationary)? } else { f64::NAN };
        theta_j.push(Estimate::new(value, se2, z));
    }

    Ok(TreatmentResult {
        theta_it,
        theta_t,
        theta_j,
        beta_hat: ife.beta,
        sigma_e2_hat: sigma_e2,
        c_hat_miss,
        treated_units: trt,
        t0,
        r,
        ife_converged: ife.converged,
        level: opts.level,
        ctx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn noiseless(theta: f64) -> TreatmentPanel {
        let (t, n, t0) = (12, 8, 8);
        let f: Vec<f64> = (0..t).map(|s| 1.0 + (s as f64 * 0.9).sin()).collect();
        let l: Vec<f64> = (0..n).map(|i| 0.5 + (i as f64 * 1.3).cos()).collect();
        let treated: Vec<bool> = (0..n).map(|i| i >= 6).collect();
        let y = DMatrix::from_fn(t, n, |s, i| f[s] * l[i] + if treated[i] && s >= t0 { theta } else { 0.0 });
        TreatmentPanel::unlabeled(y, vec![], treated, t0).unwrap()
    }

    #[test]
    fn noiseless_effects_exact() {
        let tp = noiseless(1.0);
        let res = att_tw(&tp, &AttOptions { rank: RankChoice::Fixed(1), ..Default::default() }).unwrap();
        for e in res.theta_it.iter() {
            assert_abs_diff_eq!(e.value, 1.0, epsilon = 1e-8);
        }
        for e in &res.theta_t {
            assert_abs_diff_eq!(e.value, 1.0, epsilon = 1e-8);
            assert!(e.se < 1e-6);
        }
        assert_abs_diff_eq!(res.theta_j[0].value, 1.0, epsilon = 1e-8);
        assert!(res.beta_hat.is_empty());
    }

    #[test]
    fn dof_arithmetic() {
        let e = DMatrix::from_element(200, 40, 0.0);
        assert_eq!(sigma_e_hat(&e, 2, 0).unwrap(), 0.0);
        let e = DMatrix::from_element(200, 40, 1.0);
        assert_abs_diff_eq!(sigma_e_hat(&e, 2, 0).unwrap(), 8000.0 / 7524.0);
        assert!(matches!(sigma_e_hat(&DMatrix::zeros(3, 2), 2, 0), Err(Error::DegenerateDof(_))));
    }

    #[test]
    fn covariates_recovered_when_orthogonal_to_factors() {
        let (t, n) = (20, 10);
        let f: Vec<f64> = (0..t).map(|s| (s as f64 * 0.7).sin()).collect();
        let l: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 * 0.4).cos()).collect();
        let c = DMatrix::from_fn(t, n, |s, i| f[s] * l[i]);
        // covariate: projected off the factor and loading spaces
        let raw = DMatrix::from_fn(t, n, |s, i| ((s * 13 + i * 7) as f64).cos());
        let fv = DVector::from_vec(f.clone()).normalize();
        let lv = DVector::from_vec(l.clone()).normalize();
        let pf = DMatrix::identity(t, t) - &fv * fv.transpose();
        let pl = DMatrix::identity(n, n) - &lv * lv.transpose();
        let x = pf * raw * pl;
        let y = &c + &x * 0.7;
        let mut treated = vec![false; n];
        treated[n - 1] = true;
        let tp = TreatmentPanel::unlabeled(y, vec![x], treated, 15).unwrap();
        let fit = estimate_ife_beta(&tp, 1, 1e-12, 5000).unwrap();
        assert!((fit.beta[0] - 0.7).abs() < 1e-6, "{}", fit.beta[0]);
    }

    #[test]
    fn translation_equivariance() {
        let mut tp = noiseless(0.0);
        for i in 0..tp.n() {
            for s in 0..tp.t() {
                tp.y[(s, i)] += ((s * 7 + i * 3) as f64).sin() * 0.1;
            }
        }
        let opts = AttOptions { rank: RankChoice::Fixed(1), ..Default::default() };
        let a = att_tw(&tp, &opts).unwrap();
        for i in 6..8 {
            for s in 8..12 {
                tp.y[(s, i)] += 2.5;
            }
        }
        let b = att_tw(&tp, &opts).unwrap();
        for (x, y) in a.theta_t.iter().zip(&b.theta_t) {
            assert_abs_diff_eq!(y.value - x.value, 2.5, epsilon = 1e-9);
        }
    }

    #[test]
    fn rejects_bad_assignment() {
        let y = DMatrix::from_element(5, 3, 1.0);
        assert!(TreatmentPanel::unlabeled(y.clone(), vec![], vec![false; 3], 2).is_err());
        assert!(TreatmentPanel::unlabeled(y, vec![], vec![false, false, true], 5).is_err());
    }
}
