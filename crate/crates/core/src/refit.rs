//! Re-estimation on the completed panel and per-cell inference.
//!
//! Plug-in variance pieces are always taken from one principal-components fit
//! of the completed panel, so every `Λ̂_i` and `F̂_t` shares a single rotation
//! and the sandwich forms below are rotation invariant. Which pieces enter a
//! cell's variance, and at what rate, depends on its block and on whether the
//! common component came straight from the tall-wide step or from the refit.
//!
//! `se² = V/𝕟 + W/𝕋` with `V = Λ̂_iᵀ Σ_Λ⁻¹ Γ Σ_Λ⁻¹ Λ̂_i` and
//! `W = F̂_tᵀ Σ_F⁻¹ Φ Σ_F⁻¹ F̂_t`; `(𝕟, 𝕋)` is `(N, T)`, `(N_o, T)`, `(N, T_o)` or
//! `(N_o, T_o)` by block, and `δ = min(√𝕟, √𝕋)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::apc::{estimate_apc, FactorModel};
use crate::error::{Error, Result};
use crate::normal::two_sided_z;
use crate::numerics::{quad_form, spd_inverse};
use crate::panel::{Block, BlockPartition};
use crate::tw::{bal_uses_tall, ImputedPanel};

/// Variances below this are floored so intervals stay well defined.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Principal components of the completed panel `X̃`.
pub fn reestimate(ip: &ImputedPanel, r: usize) -> Result<FactorModel> {
    estimate_apc(&ip.x_tilde, r)
}

/// Re-estimate and return the panel with `C̃⁺` as its common component.
/// Observed cells of `x_tilde` are kept.
pub fn refit(ip: &ImputedPanel, r: usize) -> Result<(ImputedPanel, FactorModel)> {
    let fm = reestimate(ip, r)?;
    Ok((ip.with_common(fm.common()), fm))
}

fn rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), m.ncols(), |k, j| m[(idx[k], j)])
}

fn gram(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.transpose() * m / m.nrows() as f64
}

fn b_matrix(full: &DMatrix<f64>, o: &[usize], m: &[usize], what: &str) -> Result<DMatrix<f64>> {
    let r = full.ncols();
    let total = (o.len() + m.len()) as f64;
    if m.is_empty() {
        return Ok(DMatrix::identity(r, r));
    }
    let go_inv = spd_inverse(&gram(&rows(full, o)))
        .ok_or_else(|| Error::SingularSubBlock(format!("{what} second moment over the observed block")))?;
    let gm = gram(&rows(full, m));
    Ok(DMatrix::identity(r, r) * (o.len() as f64 / total) + gm * go_inv * (m.len() as f64 / total))
}

/// `B_Λ = (N_o/N) I + (N_m/N)(Λ_mᵀΛ_m/N_m)(Λ_oᵀΛ_o/N_o)⁻¹` and the analogous
/// `B_F` over periods.
pub fn compute_b_matrices(fm: &FactorModel, bp: &BlockPartition) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let bl = b_matrix(&fm.lambda, bp.observed_series(), bp.other_series(), "loading")?;
    let bf = b_matrix(&fm.f, bp.observed_periods(), bp.other_periods(), "factor")?;
    Ok((bl, bf))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceComponents {
    pub sigma_lambda: DMatrix<f64>,
    pub sigma_f: DMatrix<f64>,
    pub sigma_lambda_o: DMatrix<f64>,
    pub sigma_lambda_m: Option<DMatrix<f64>>,
    pub sigma_f_o: DMatrix<f64>,
    pub sigma_f_m: Option<DMatrix<f64>>,
    /// `Γ̂_t` per period, original order.
    pub gamma: Vec<DMatrix<f64>>,
    /// `Γ̂_ot`, over the fully observed series only.
    pub gamma_o: Vec<DMatrix<f64>>,
    /// `Φ̂_i` per series, original order.
    pub phi: Vec<DMatrix<f64>>,
    /// `Φ̂_oi`, over the fully observed periods only.
    pub phi_o: Vec<DMatrix<f64>>,
    pub b_lambda: DMatrix<f64>,
    pub b_f: DMatrix<f64>,
    pub hac_lags: usize,
    /// Residuals `X − F̂Λ̂ᵀ`, NaN where unobserved.
    pub residuals: DMatrix<f64>,
    /// Plug-in factors and loadings the components were built from.
    pub f: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
}

/// Mean of `z_k z_kᵀ e_k²` over the listed indices.
fn outer_mean(z: &DMatrix<f64>, e: impl Fn(usize) -> f64, idx: &[usize]) -> DMatrix<f64> {
    let r = z.ncols();
    let mut acc = DMatrix::zeros(r, r);
    for &k in idx {
        let e2 = e(k).powi(2);
        let zk = z.row(k).transpose();
        acc += &zk * zk.transpose() * e2;
    }
    acc / idx.len() as f64
}

/// Bartlett-weighted long-run variance of `F̂_t e_t` over the periods in
/// `idx` (ascending time order).
pub fn hac(f: &DMatrix<f64>, e: impl Fn(usize) -> f64, idx: &[usize], lags: usize) -> DMatrix<f64> {
    let r = f.ncols();
    let n = idx.len();
    let g: Vec<DVector<f64>> = idx.iter().map(|&t| f.row(t).transpose() * e(t)).collect();
    let mut acc = DMatrix::zeros(r, r);
    for gt in &g {
        acc += gt * gt.transpose();
    }
    for l in 1..=lags.min(n.saturating_sub(1)) {
        let w = 1.0 - l as f64 / (lags as f64 + 1.0);
        let mut cross = DMatrix::zeros(r, r);
        for k in l..n {
            cross += &g[k] * g[k - l].transpose();
        }
        acc += (&cross + cross.transpose()) * w;
    }
    acc / n as f64
}

/// Plug-in estimates of every matrix the cell variances need, from a fit
/// `fm` of the whole panel and the observed data.
///
/// `Γ̂_t` averages over the series observed at `t` (errors taken as
/// cross-sectionally uncorrelated); `Φ̂_i` is a Bartlett HAC over the periods
/// where series `i` is observed.
pub fn estimate_variance_components(
    fm: &FactorModel,
    x: &DMatrix<f64>,
    mask: &DMatrix<bool>,
    bp: &BlockPartition,
    hac_lags: usize,
) -> Result<VarianceComponents> {
    let (t, n) = x.shape();
    let r = fm.r();
    if fm.t() != t || fm.n() != n {
        return Err(Error::InvalidInput("factor model does not match panel dimensions".into()));
    }
    let c = fm.common();
    let residuals = DMatrix::from_fn(t, n, |tt, i| if mask[(tt, i)] { x[(tt, i)] - c[(tt, i)] } else { f64::NAN });

    let sigma_lambda = gram(&fm.lambda);
    let sigma_f = gram(&fm.f);
    let sigma_lambda_o = gram(&rows(&fm.lambda, bp.observed_series()));
    let sigma_f_o = gram(&rows(&fm.f, bp.observed_periods()));
    let sigma_lambda_m = (bp.n_m() > 0).then(|| gram(&rows(&fm.lambda, bp.other_series())));
    let sigma_f_m = (bp.t_m() > 0).then(|| gram(&rows(&fm.f, bp.other_periods())));
    let (b_lambda, b_f) = compute_b_matrices(fm, bp)?;

    let need = r + 1;
    let mut obs_o: Vec<usize> = bp.observed_series().to_vec();
    obs_o.sort_unstable();
    let mut per_o: Vec<usize> = bp.observed_periods().to_vec();
    per_o.sort_unstable();
    if obs_o.len() < need || per_o.len() < need {
        return Err(Error::InsufficientData(format!(
            "balanced block is {}×{}, need at least {need} in each direction",
            per_o.len(),
            obs_o.len()
        )));
    }

    let mut gamma = Vec::with_capacity(t);
    let mut gamma_o = Vec::with_capacity(t);
    for tt in 0..t {
        let seen: Vec<usize> = (0..n).filter(|&i| mask[(tt, i)]).collect();
        if seen.len() < need {
            return Err(Error::InsufficientData(format!("period {tt} has {} observed series", seen.len())));
        }
        let e = |i: usize| residuals[(tt, i)];
        gamma.push(outer_mean(&fm.lambda, e, &seen));
        gamma_o.push(outer_mean(&fm.lambda, e, &obs_o));
    }
    let mut phi = Vec::with_capacity(n);
    let mut phi_o = Vec::with_capacity(n);
    for i in 0..n {
        let seen: Vec<usize> = (0..t).filter(|&tt| mask[(tt, i)]).collect();
        if seen.len() < need {
            return Err(Error::InsufficientData(format!("series {i} has {} observed periods", seen.len())));
        }
        let e = |tt: usize| residuals[(tt, i)];
        phi.push(hac(&fm.f, e, &seen, hac_lags));
        phi_o.push(hac(&fm.f, e, &per_o, hac_lags));
    }

    Ok(VarianceComponents {
        sigma_lambda,
        sigma_f,
        sigma_lambda_o,
        sigma_lambda_m,
        sigma_f_o,
        sigma_f_m,
        gamma,
        gamma_o,
        phi,
        phi_o,
        b_lambda,
        b_f,
        hac_lags,
        residuals,
        f: fm.f.clone(),
        lambda: fm.lambda.clone(),
    })
}

/// Which estimator the common component came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// Tall-wide estimate, not re-fitted.
    TallWide,
    /// Principal components of the completed panel.
    Refit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceOptions {
    pub level: f64,
    pub regime: Regime,
    /// Treat sub-block second moments as equal to full-sample ones.
    pub stationary: bool,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self { level: 0.95, regime: Regime::Refit, stationary: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellInference {
    pub block: Block,
    pub c_hat: f64,
    pub se: f64,
    pub delta: f64,
    /// `𝕍̂_it = δ² · se²`
    pub v_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Which side of a cell's variance uses sub-sample pieces, and the sample
/// sizes `(𝕟, 𝕋)` the two sides average over.
#[derive(Debug, Clone, Copy, PartialEq)]
struct CellPlan {
    n_eff: usize,
    t_eff: usize,
    loading_sub: bool,
    factor_sub: bool,
}

fn plan(bp: &BlockPartition, block: Block, regime: Regime) -> CellPlan {
    let (n, t, n_o, t_o) = (bp.n(), bp.t(), bp.n_o(), bp.t_o());
    let tall = CellPlan { n_eff: n_o, t_eff: t, loading_sub: true, factor_sub: false };
    let wide = CellPlan { n_eff: n, t_eff: t_o, loading_sub: false, factor_sub: true };
    match (block, regime) {
        (Block::Bal, Regime::Refit) => CellPlan { n_eff: n, t_eff: t, loading_sub: false, factor_sub: false },
        (Block::Bal, Regime::TallWide) if bal_uses_tall(bp) => tall,
        (Block::Bal, Regime::TallWide) => wide,
        (Block::Tall, _) => tall,
        (Block::Wide, _) => wide,
        (Block::Miss, _) => CellPlan { n_eff: n_o, t_eff: t_o, loading_sub: true, factor_sub: true },
    }
}

/// Rate `δ` of a cell's common-component estimate under `regime`.
pub fn cell_delta(bp: &BlockPartition, block: Block, regime: Regime) -> f64 {
    let p = plan(bp, block, regime);
    (p.n_eff.min(p.t_eff) as f64).sqrt()
}

impl VarianceComponents {
    /// `(V, W)` for cell `(i, t)`.
    fn sandwiches(&self, i: usize, t: usize, p: CellPlan, opts: &InferenceOptions) -> Result<(f64, f64)> {
        let lam = self.lambda.row(i).transpose();
        let ft = self.f.row(t).transpose();
        let inv = |m: &DMatrix<f64>, what: &str| {
            spd_inverse(m).ok_or_else(|| Error::SingularSubBlock(format!("{what} second moment is singular")))
        };
        let sub_l = p.loading_sub && !opts.stationary;
        let sub_f = p.factor_sub && !opts.stationary;

        let v = if !sub_l {
            let s = inv(&self.sigma_lambda, "loading")?;
            quad_form(&lam, &(&s * &self.gamma[t] * &s))
        } else {
            match opts.regime {
                Regime::Refit => {
                    let s = inv(&self.sigma_lambda, "loading")?;
                    let mid = &self.b_lambda * &self.gamma_o[t] * self.b_lambda.transpose();
                    quad_form(&lam, &(&s * mid * &s))
                }
                Regime::TallWide => {
                    let s = inv(&self.sigma_lambda_o, "observed-series loading")?;
                    quad_form(&lam, &(&s * &self.gamma_o[t] * &s))
                }
            }
        };
        let w = if !sub_f {
            let s = inv(&self.sigma_f, "factor")?;
            quad_form(&ft, &(&s * &self.phi[i] * &s))
        } else {
            match opts.regime {
                Regime::Refit => {
                    let s = inv(&self.sigma_f, "factor")?;
                    let mid = &self.b_f * &self.phi_o[i] * self.b_f.transpose();
                    quad_form(&ft, &(&s * mid * &s))
                }
                Regime::TallWide => {
                    let s = inv(&self.sigma_f_o, "observed-period factor")?;
                    quad_form(&ft, &(&s * &self.phi_o[i] * &s))
                }
            }
        };
        Ok((v, w))
    }

    /// Standard error and confidence interval for the common component
    /// `c_hat` at series `i`, period `t` (original indices).
    pub fn cell_inference(
        &self,
        bp: &BlockPartition,
        i: usize,
        t: usize,
        c_hat: f64,
        opts: &InferenceOptions,
    ) -> Result<CellInference> {
        if !(opts.level > 0.0 && opts.level < 1.0) {
            return Err(Error::InvalidInput(format!("confidence level {} outside (0, 1)", opts.level)));
        }
        let block = bp.block_of(i, t);
        let p = plan(bp, block, opts.regime);
        let (v, w) = self.sandwiches(i, t, p, opts)?;
        let mut se2 = v / p.n_eff as f64 + w / p.t_eff as f64;
        if !(se2 > VARIANCE_FLOOR) {
            if se2 < -VARIANCE_FLOOR {
                log::warn!("negative variance {se2:.3e} at ({i}, {t}) floored");
            }
            se2 = VARIANCE_FLOOR;
        }
        let se = se2.sqrt();
        let delta = (p.n_eff.min(p.t_eff) as f64).sqrt();
        let z = two_sided_z(opts.level);
        Ok(CellInference {
            block,
            c_hat,
            se,
            delta,
            v_hat: se2 * delta * delta,
            ci_low: c_hat - z * se,
            ci_high: c_hat + z * se,
        })
    }
}

/// Inference for every cell of `c_hat` (`T × N`, original order).
pub fn panel_inference(
    vc: &VarianceComponents,
    bp: &BlockPartition,
    c_hat: &DMatrix<f64>,
    opts: &InferenceOptions,
) -> Result<DMatrix<CellInference>> {
    let (t, n) = c_hat.shape();
    let mut cells = Vec::with_capacity(t * n);
    for i in 0..n {
        for tt in 0..t {
            cells.push(vc.cell_inference(bp, i, tt, c_hat[(tt, i)], opts)?);
        }
    }
    Ok(DMatrix::from_vec(t, n, cells))
}

/// Tall-wide output followed by a refit and inference on every cell.
#[derive(Debug, Clone)]
pub struct RefitOutput {
    pub imputed: ImputedPanel,
    pub model: FactorModel,
    pub components: VarianceComponents,
    pub cells: DMatrix<CellInference>,
}

/// Inference for a tall-wide (`regime = TallWide`) or refitted panel. The
/// plug-in pieces always come from a refit of `ip.x_tilde` at rank `r`;
/// under `Regime::Refit` the returned panel carries `C̃⁺`.
pub fn infer(ip: &ImputedPanel, r: usize, hac_lags: usize, opts: &InferenceOptions) -> Result<RefitOutput> {
    let (refitted, fm) = refit(ip, r)?;
    let vc = estimate_variance_components(&fm, &ip.x_tilde, &ip.mask, &ip.partition, hac_lags)?;
    let mut out = match opts.regime {
        Regime::Refit => refitted,
        Regime::TallWide => ip.clone(),
    };
    let cells = panel_inference(&vc, &out.partition, &out.c_tilde, opts)?;
    out.variance = Some(cells.map(|c| c.v_hat));
    Ok(RefitOutput { imputed: out, model: fm, components: vc, cells })
}

/// Per-block `‖Ĉ − C⁰‖_F / √(block size)` with block-size weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockErrors {
    /// Indexed like [`Block::ALL`]; NaN for an empty block.
    pub block: [f64; 4],
    pub weights: [f64; 4],
    /// `‖Ĉ − C⁰‖_F / √(NT)`
    pub overall: f64,
}

impl BlockErrors {
    pub fn get(&self, b: Block) -> f64 {
        self.block[Block::ALL.iter().position(|&x| x == b).unwrap()]
    }
}

pub fn block_error_summary(c_hat: &DMatrix<f64>, c0: &DMatrix<f64>, bp: &BlockPartition) -> BlockErrors {
    let total = (bp.t() * bp.n()) as f64;
    let mut block = [f64::NAN; 4];
    let mut weights = [0.0; 4];
    for (k, &b) in Block::ALL.iter().enumerate() {
        let (series, periods) = bp.block_indices(b);
        let size = series.len() * periods.len();
        weights[k] = size as f64 / total;
        if size == 0 {
            continue;
        }
        let mut ss = 0.0;
        for &i in series {
            for &t in periods {
                ss += (c_hat[(t, i)] - c0[(t, i)]).powi(2);
            }
        }
        block[k] = (ss / size as f64).sqrt();
    }
    let overall = (c_hat - c0).norm() / total.sqrt();
    BlockErrors { block, weights, overall }
}
