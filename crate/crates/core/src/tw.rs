//! The tall-wide imputation estimator.
//!
//! Factors come from principal components on the TALL block (every period,
//! fully observed series), loadings from the WIDE block (fully observed
//! periods, every series). The two fits are rotated onto each other by
//! regressing TALL loadings on WIDE loadings over the balanced series, which
//! gives the common component on the MISS block. Observed cells are returned
//! untouched.
//!
//! Sub-model matrices are indexed by position in the partition order, not by
//! original index: `f_tall` row `k` is period `row_perm[k]`, `lambda_wide` row
//! `k` is series `col_perm[k]`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::apc::{estimate_apc, select_r_with, soft_threshold_apc, FactorModel, InfoCriterion};
use crate::error::{Error, Result};
use crate::numerics::{ols, sym_condition_number};
use crate::panel::{check_order_conditions, partition_blocks, Block, BlockPartition, Panel};

pub const DEFAULT_R_MAX: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RankChoice {
    Fixed(usize),
    /// Information-criterion choice per block; the larger of the two is used
    /// for both.
    Auto {
        r_max: usize,
        criterion: InfoCriterion,
    },
}

impl RankChoice {
    pub fn auto() -> Self {
        RankChoice::Auto { r_max: DEFAULT_R_MAX, criterion: InfoCriterion::Icp2 }
    }
}

/// How each of the TALL and WIDE blocks is factored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub enum BlockEstimator {
    #[default]
    Apc,
    /// Soft-thresholded components with `γ = gamma_frac · D₁` of each block.
    SoftThreshold { gamma_frac: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwOptions {
    pub rank: RankChoice,
    pub estimator: BlockEstimator,
}

impl TwOptions {
    pub fn fixed(r: usize) -> Self {
        Self { rank: RankChoice::Fixed(r), estimator: BlockEstimator::Apc }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwEstimate {
    /// `T × r`, TALL-block factors.
    pub f_tall: DMatrix<f64>,
    /// `N_o × r`, TALL-block loadings.
    pub lambda_tall: DMatrix<f64>,
    /// `T_o × r`, WIDE-block factors.
    pub f_wide: DMatrix<f64>,
    /// `N × r`, WIDE-block loadings.
    pub lambda_wide: DMatrix<f64>,
    /// `r × r` with `Λ_tall,i ≈ H Λ_wide,i` on the balanced series.
    pub h_miss: DMatrix<f64>,
    pub r_tall: usize,
    pub r_wide: usize,
    pub r: usize,
}

/// A completed panel. Matrices are in original order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputedPanel {
    /// Observed values where observed, `c_tilde` elsewhere.
    pub x_tilde: DMatrix<f64>,
    pub c_tilde: DMatrix<f64>,
    pub mask: DMatrix<bool>,
    pub partition: BlockPartition,
    /// Per-cell `𝕍̂_it`, once inference has been run.
    pub variance: Option<DMatrix<f64>>,
}

impl ImputedPanel {
    pub fn block(&self, i: usize, t: usize) -> Block {
        self.partition.block_of(i, t)
    }

    /// Convergence-rate class of `c_tilde` at `(i, t)`.
    pub fn delta(&self, i: usize, t: usize) -> f64 {
        classify_cell(&self.partition, i, t).1
    }

    /// Same panel with a different common component; `x_tilde` is rebuilt so
    /// observed cells keep their data.
    pub fn with_common(&self, c: DMatrix<f64>) -> ImputedPanel {
        let x_tilde = fill(&self.x_tilde, &self.mask, &c);
        ImputedPanel { x_tilde, c_tilde: c, mask: self.mask.clone(), partition: self.partition.clone(), variance: None }
    }
}

/// `P_Ω(X) + P_Ω⊥(C)`
pub(crate) fn fill(x: &DMatrix<f64>, mask: &DMatrix<bool>, c: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |t, i| if mask[(t, i)] { x[(t, i)] } else { c[(t, i)] })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwOutput {
    pub imputed: ImputedPanel,
    pub estimate: TwEstimate,
}

/// Block of `(i, t)` and the rate at which the tall-wide common component
/// converges there.
///
/// TALL `min(√N_o, √T)`, WIDE `min(√N, √T_o)`, MISS `min(√N_o, √T_o)`, BAL the
/// better of the TALL and WIDE rates.
pub fn classify_cell(bp: &BlockPartition, i: usize, t: usize) -> (Block, f64) {
    let block = bp.block_of(i, t);
    (block, tw_rate(bp, block))
}

pub fn tw_rate(bp: &BlockPartition, block: Block) -> f64 {
    let s = |a: usize, b: usize| (a.min(b) as f64).sqrt();
    let (n, t, n_o, t_o) = (bp.n(), bp.t(), bp.n_o(), bp.t_o());
    match block {
        Block::Tall => s(n_o, t),
        Block::Wide => s(n, t_o),
        Block::Bal => s(n_o, t).max(s(n, t_o)),
        Block::Miss => s(n_o, t_o),
    }
}

/// BAL cells take the TALL fit only when it converges strictly faster.
pub fn bal_uses_tall(bp: &BlockPartition) -> bool {
    bp.n_o().min(bp.t()) > bp.n().min(bp.t_o())
}

/// Tall-wide imputation with the partition computed from the mask.
pub fn impute_tw(p: &Panel, rank: RankChoice) -> Result<TwOutput> {
    let bp = partition_blocks(p)?;
    impute_tw_with(p, &bp, &TwOptions { rank, estimator: BlockEstimator::Apc })
}

fn fit_block(x: &DMatrix<f64>, r: usize, est: BlockEstimator) -> Result<FactorModel> {
    match est {
        BlockEstimator::Apc => estimate_apc(x, r),
        BlockEstimator::SoftThreshold { gamma_frac } => {
            let top = estimate_apc(x, 1)?.d[0];
            soft_threshold_apc(x, r, gamma_frac * top)
        }
    }
}

fn auto_rank(x: &DMatrix<f64>, r_max: usize, crit: InfoCriterion, what: &str) -> Result<usize> {
    let cap = x.nrows().min(x.ncols()) / 2;
    let r_max = r_max.min(cap);
    if r_max == 0 {
        return Err(Error::RankError { requested: 1, max: 0 });
    }
    let sel = select_r_with(x, r_max, crit)?;
    log::debug!("{what} block: selected r = {} from {:?}", sel.r, sel.criteria);
    Ok(sel.r)
}

pub fn impute_tw_with(p: &Panel, bp: &BlockPartition, opts: &TwOptions) -> Result<TwOutput> {
    if bp.t() != p.t() || bp.n() != p.n() {
        return Err(Error::InvalidInput("partition does not match panel dimensions".into()));
    }
    let (t, n, t_o, n_o) = (bp.t(), bp.n(), bp.t_o(), bp.n_o());
    if t_o == 0 || n_o == 0 {
        return Err(Error::NoBalancedBlock(format!("T_o = {t_o}, N_o = {n_o}")));
    }
    let xp = bp.permute(p.values());
    let tall = xp.columns(0, n_o).into_owned();
    let wide = xp.rows(0, t_o).into_owned();
    if tall.iter().chain(wide.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("partition does not match the observation mask".into()));
    }

    let (r_tall, r_wide) = match opts.rank {
        RankChoice::Fixed(r) => (r, r),
        RankChoice::Auto { r_max, criterion } => {
            (auto_rank(&tall, r_max, criterion, "tall")?, auto_rank(&wide, r_max, criterion, "wide")?)
        }
    };
    let r = r_tall.max(r_wide);
    if r == 0 {
        return Err(Error::RankError { requested: 0, max: t_o.min(n_o) });
    }
    let oc = check_order_conditions(bp, r);
    if !oc.ok() {
        return Err(Error::OrderCondition(format!(
            "r = {r} with T = {t}, N = {n}, T_o = {t_o}, N_o = {n_o} violates {}",
            oc.violations().join(" and ")
        )));
    }

    let tall_fit = fit_block(&tall, r, opts.estimator)?;
    let wide_fit = fit_block(&wide, r, opts.estimator)?;
    let r_eff = tall_fit.r().min(wide_fit.r());
    let f_tall = tall_fit.f.columns(0, r_eff).into_owned();
    let lambda_tall = tall_fit.lambda.columns(0, r_eff).into_owned();
    let f_wide = wide_fit.f.columns(0, r_eff).into_owned();
    let lambda_wide = wide_fit.lambda.columns(0, r_eff).into_owned();

    let lw_o = lambda_wide.rows(0, n_o).into_owned();
    let h_miss = match ols(&lambda_tall, &lw_o) {
        Ok(b) => b.transpose(),
        Err(Error::SingularDesign(msg)) => {
            return Err(Error::CollinearLoadings(format!("WIDE loadings on the balanced series: {msg}")))
        }
        Err(e) => return Err(e),
    };
    let cond = sym_condition_number(&(h_miss.transpose() * &h_miss)).sqrt();
    if !(cond < 1e10) {
        log::warn!("rotation between TALL and WIDE fits is ill-conditioned ({cond:.3e})");
    }

    let use_tall = bal_uses_tall(bp);
    let fh = &f_tall * &h_miss;
    let cp = DMatrix::from_fn(t, n, |pt, pi| match bp.block_at(pi, pt) {
        Block::Tall => f_tall.row(pt).dot(&lambda_tall.row(pi)),
        Block::Wide => f_wide.row(pt).dot(&lambda_wide.row(pi)),
        Block::Bal if use_tall => f_tall.row(pt).dot(&lambda_tall.row(pi)),
        Block::Bal => f_wide.row(pt).dot(&lambda_wide.row(pi)),
        Block::Miss => fh.row(pt).dot(&lambda_wide.row(pi)),
    });
    let c_tilde = bp.unpermute(&cp);
    let x_tilde = fill(p.values(), p.mask(), &c_tilde);

    Ok(TwOutput {
        imputed: ImputedPanel { x_tilde, c_tilde, mask: p.mask().clone(), partition: bp.clone(), variance: None },
        estimate: TwEstimate { f_tall, lambda_tall, f_wide, lambda_wide, h_miss, r_tall, r_wide, r: r_eff },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rank2(t: usize, n: usize) -> DMatrix<f64> {
        let f = DMatrix::from_fn(t, 2, |tt, j| ((tt * 3 + j * 7 + 1) as f64 * 0.37).sin());
        let l = DMatrix::from_fn(n, 2, |i, j| ((i * 5 + j * 2 + 3) as f64 * 0.53).cos());
        f * l.transpose()
    }

    #[test]
    fn complete_panel_is_apc() {
        let x = rank2(12, 9) + DMatrix::from_fn(12, 9, |t, i| ((t * 9 + i) as f64).sin() * 0.1);
        let p = Panel::complete(x.clone()).unwrap();
        let out = impute_tw(&p, RankChoice::Fixed(2)).unwrap();
        assert_eq!(out.imputed.x_tilde, x);
        let apc = estimate_apc(&x, 2).unwrap().common();
        assert!((out.imputed.c_tilde - apc).amax() < 1e-10);
    }

    #[test]
    fn noiseless_recovery() {
        let x = rank2(20, 15);
        let mut mask = DMatrix::from_element(20, 15, true);
        for t in 14..20 {
            for i in 10..15 {
                mask[(t, i)] = false;
            }
        }
        mask[(3, 12)] = false;
        let p = Panel::with_mask(x.clone(), mask).unwrap();
        let out = impute_tw(&p, RankChoice::Fixed(2)).unwrap();
        assert!((out.imputed.c_tilde - &x).amax() <= 1e-8 * x.amax());
    }

    #[test]
    fn rates() {
        let bp = BlockPartition::from_parts((0..200).collect(), (0..200).collect(), 120, 120).unwrap();
        assert_eq!(classify_cell(&bp, 150, 150), (Block::Miss, 120f64.sqrt()));
        assert_eq!(classify_cell(&bp, 10, 10).1, 120f64.sqrt());
        assert!(!bal_uses_tall(&bp));
        let full = BlockPartition::from_parts((0..5).collect(), (0..7).collect(), 5, 7).unwrap();
        assert_eq!(classify_cell(&full, 3, 2), (Block::Bal, 5f64.sqrt()));
    }

    #[test]
    fn order_condition_enforced() {
        let x = rank2(10, 10);
        let mut mask = DMatrix::from_element(10, 10, true);
        for i in 1..10 {
            mask[(9, i)] = false;
        }
        let p = Panel::with_mask(x, mask).unwrap();
        assert!(matches!(impute_tw(&p, RankChoice::Fixed(2)), Err(Error::OrderCondition(_))));
    }
}
