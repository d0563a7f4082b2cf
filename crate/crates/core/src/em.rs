//! Iterative principal-components imputation (the EM baseline).
//!
//! Start from a first guess of the missing cells, then alternate a rank-`r`
//! principal-components fit of the filled panel with refilling the missing
//! cells from the fitted common component. Every iteration re-orthonormalizes
//! the factors, since each fit is a fresh APC.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::apc::{estimate_apc, estimate_apc_warm, FactorModel};
use crate::error::{Error, Result};
use crate::numerics::ols;
use crate::panel::{partition_blocks, BlockPartition, Panel};
use crate::tw::{fill, impute_tw_with, ImputedPanel, TwOptions};

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum EmInit {
    /// Factors and loadings from the balanced block, extended by regression.
    #[default]
    Balanced,
    Zero,
    TallWide,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub init: EmInit,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self { init: EmInit::Balanced, tol: DEFAULT_TOL, max_iter: DEFAULT_MAX_ITER }
    }
}

#[derive(Debug, Clone)]
pub struct EmOutput {
    pub imputed: ImputedPanel,
    pub model: FactorModel,
    pub iterations: usize,
    pub converged: bool,
    /// `‖filled⁽ᵏ⁻¹⁾ − F⁽ᵏ⁾Λ⁽ᵏ⁾ᵀ‖²_F` per iteration; non-increasing.
    pub objective: Vec<f64>,
}

/// APC on the balanced block; loadings of every series by regressing its
/// balanced-period values on those factors, then factors of every period by
/// regressing its fully observed series on their loadings.
fn balanced_start(p: &Panel, bp: &BlockPartition, r: usize) -> Result<DMatrix<f64>> {
    let xp = bp.permute(p.values());
    let (t_o, n_o) = (bp.t_o(), bp.n_o());
    let bal = xp.view((0, 0), (t_o, n_o)).into_owned();
    let fm = estimate_apc(&bal, r)?;
    let wide = xp.rows(0, t_o).into_owned();
    let lambda = ols(&wide, &fm.f)?.transpose();
    let tall_t = xp.columns(0, n_o).transpose();
    let f = ols(&tall_t, &lambda.rows(0, n_o).into_owned())?.transpose();
    Ok(bp.unpermute(&(f * lambda.transpose())))
}

pub fn impute_em(p: &Panel, r: usize, opts: &EmOptions) -> Result<EmOutput> {
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidInput(format!("tolerance must be positive, got {}", opts.tol)));
    }
    let (t, n) = (p.t(), p.n());
    let max = t.min(n);
    if r == 0 || r > max {
        return Err(Error::RankError { requested: r, max });
    }
    let bp = match (opts.init, partition_blocks(p)) {
        (_, Ok(bp)) => bp,
        // a zero start needs no balanced block; report cells against an empty one
        (EmInit::Zero, Err(Error::NoBalancedBlock(_))) => {
            BlockPartition::from_parts((0..t).collect(), (0..n).collect(), 0, 0)?
        }
        (_, Err(e)) => return Err(e),
    };
    let mut c = match opts.init {
        EmInit::Balanced => balanced_start(p, &bp, r)?,
        EmInit::Zero => DMatrix::zeros(t, n),
        EmInit::TallWide => impute_tw_with(p, &bp, &TwOptions::fixed(r))?.imputed.c_tilde,
    };

    let x = p.values();
    let mask = p.mask();
    let missing: Vec<(usize, usize)> =
        (0..n).flat_map(|i| (0..t).map(move |tt| (tt, i))).filter(|&(tt, i)| !mask[(tt, i)]).collect();

    let mut objective = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut model: Option<FactorModel> = None;
    while iterations < opts.max_iter {
        iterations += 1;
        let filled = fill(x, mask, &c);
        let fm = match &model {
            Some(prev) => estimate_apc_warm(&filled, r, prev)?,
            None => estimate_apc(&filled, r)?,
        };
        let next = fm.common();
        objective.push((&filled - &next).norm_squared());
        let change = missing.iter().map(|&cell| (next[cell] - c[cell]).abs()).fold(0.0, f64::max);
        let scale = 1.0 + next.amax();
        c = next;
        model = Some(fm);
        if change / scale < opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("EM stopped after {iterations} iterations without converging");
    }
    let x_tilde = fill(x, mask, &c);
    let model = model.expect("at least one iteration");
    Ok(EmOutput {
        imputed: ImputedPanel { x_tilde, c_tilde: c, mask: mask.clone(), partition: bp, variance: None },
        model,
        iterations,
        converged,
        objective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn panel(noise: f64) -> (Panel, DMatrix<f64>) {
        let f = DMatrix::from_fn(30, 2, |t, j| ((t * 3 + j * 5 + 1) as f64 * 0.41).sin());
        let l = DMatrix::from_fn(25, 2, |i, j| ((i * 7 + j * 3 + 2) as f64 * 0.29).cos());
        let c = f * l.transpose();
        let x = &c + DMatrix::from_fn(30, 25, |t, i| ((t * 31 + i * 17) as f64).sin() * noise);
        let mut mask = DMatrix::from_element(30, 25, true);
        for t in 20..30 {
            for i in 15..25 {
                mask[(t, i)] = false;
            }
        }
        (Panel::with_mask(x, mask).unwrap(), c)
    }

    #[test]
    fn complete_data_converges_at_once() {
        let x = DMatrix::from_fn(10, 8, |t, i| ((t * 8 + i) as f64).cos());
        let p = Panel::complete(x.clone()).unwrap();
        let out = impute_em(&p, 2, &EmOptions::default()).unwrap();
        assert_eq!(out.iterations, 1);
        assert!(out.converged);
        assert!((out.imputed.c_tilde - estimate_apc(&x, 2).unwrap().common()).amax() < 1e-12);
    }

    #[test]
    fn noiseless_fixed_point() {
        let (p, c) = panel(0.0);
        for init in [EmInit::Balanced, EmInit::TallWide] {
            let out = impute_em(&p, 2, &EmOptions { init, tol: 1e-12, max_iter: 50 }).unwrap();
            assert!((out.imputed.c_tilde - &c).amax() <= 1e-8 * c.amax(), "{init:?}");
        }
    }

    #[test]
    fn objective_non_increasing_and_mask_kept() {
        let (p, _) = panel(0.3);
        let out = impute_em(&p, 2, &EmOptions { init: EmInit::Zero, ..Default::default() }).unwrap();
        for w in out.objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-10);
        }
        for t in 0..30 {
            for i in 0..25 {
                if p.is_observed(i, t) {
                    assert_eq!(out.imputed.x_tilde[(t, i)], p.values()[(t, i)]);
                }
            }
        }
    }
}
