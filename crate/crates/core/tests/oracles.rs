//! Frozen reference values from an independent numpy implementation
//! (`tests/oracle/oracle.py`, LAPACK SVD) on a fixed 12×10 panel.

use fbi_tw::apc::estimate_apc;
use fbi_tw::em::{impute_em, EmInit, EmOptions};
use fbi_tw::panel::{partition_blocks, Panel};
use fbi_tw::refit::{infer, refit, InferenceOptions, Regime};
use fbi_tw::tw::{impute_tw, RankChoice};
use nalgebra::DMatrix;

const T: usize = 12;
const N: usize = 10;

fn panel() -> (DMatrix<f64>, Panel) {
    let f0 = DMatrix::from_fn(T, 2, |a, j| (0.7 * ((a + 1) * (j + 1)) as f64).sin() + if j == 0 { 0.3 } else { 0.0 });
    let l0 = DMatrix::from_fn(N, 2, |b, j| (0.45 * ((b + 1) * (j + 2)) as f64).cos() + 0.5);
    let noise = DMatrix::from_fn(T, N, |t, i| {
        let (t, i) = (t as f64, i as f64);
        0.2 * (1.3 * t * t + 0.7 * i + 0.1 * i * i).sin()
    });
    let x = f0 * l0.transpose() + noise;
    let mut mask = DMatrix::from_element(T, N, true);
    for t in [2, 5, 9, 11] {
        for i in [1, 4, 7, 9] {
            mask[(t, i)] = false;
        }
    }
    mask[(5, 4)] = true;
    (x.clone(), Panel::with_mask(x, mask).unwrap())
}

/// `(series, period)` cells checked against the reference.
const CELLS: [(usize, usize); 7] = [(1, 2), (4, 5), (7, 9), (9, 11), (0, 9), (1, 0), (0, 0)];

const TW: [f64; 7] = [
    0.7216201785721736,
    1.0866397720620544,
    1.2102995105433991,
    -1.288761438796218,
    1.631539743336205,
    -0.09561646869582632,
    1.7415247554268172,
];
const REFIT: [f64; 7] = [
    0.7240564418266092,
    1.0123694383326147,
    1.2121495937662392,
    -1.295898190115717,
    1.6311544106085076,
    -0.09736238119536159,
    1.7369864830678245,
];
const EM: [f64; 7] = [
    0.713829580471487,
    0.9805577255525433,
    1.2088710858539304,
    -1.2707901568029105,
    1.629132369228434,
    -0.09646267066009177,
    1.7386935866070157,
];

fn check(c: &DMatrix<f64>, want: &[f64; 7], tol: f64, what: &str) {
    for (&(i, t), &w) in CELLS.iter().zip(want) {
        let got = c[(t, i)];
        assert!((got - w).abs() <= tol, "{what} ({i},{t}): {got} vs {w}");
    }
}

#[test]
fn partition_matches_reference() {
    let (_, p) = panel();
    let bp = partition_blocks(&p).unwrap();
    assert_eq!(bp.observed_series(), &[0, 2, 3, 5, 6, 8]);
    assert_eq!(bp.observed_periods(), &[0, 1, 3, 4, 6, 7, 8, 10]);
}

#[test]
fn apc_matches_reference() {
    let (x, _) = panel();
    let c = estimate_apc(&x, 2).unwrap().common();
    assert!((c[(0, 0)] - 1.7149281939902798).abs() < 1e-10);
    assert!((c[(11, 9)] - -1.3570803615548273).abs() < 1e-10);
}

#[test]
fn tall_wide_and_refit_match_reference() {
    let (x, p) = panel();
    let tw = impute_tw(&p, RankChoice::Fixed(2)).unwrap();
    check(&tw.imputed.c_tilde, &TW, 1e-10, "tw");
    // the observed cell inside the missing rectangle is kept
    assert_eq!(tw.imputed.x_tilde[(5, 4)], x[(5, 4)]);
    let (re, _) = refit(&tw.imputed, 2).unwrap();
    check(&re.c_tilde, &REFIT, 1e-10, "refit");
}

#[test]
fn em_fixed_point_matches_reference() {
    let (_, p) = panel();
    let out = impute_em(&p, 2, &EmOptions { init: EmInit::Balanced, tol: 1e-13, max_iter: 5000 }).unwrap();
    assert!(out.converged);
    check(&out.imputed.c_tilde, &EM, 1e-8, "em");
}

#[test]
fn miss_cell_standard_error_matches_reference() {
    let (_, p) = panel();
    let tw = impute_tw(&p, RankChoice::Fixed(2)).unwrap();
    for regime in [Regime::Refit, Regime::TallWide] {
        let opts = InferenceOptions { regime, ..Default::default() };
        let out = infer(&tw.imputed, 2, 0, &opts).unwrap();
        let se = out.cells[(9, 7)].se;
        assert!((se - 0.11099076399155028).abs() < 1e-10, "{regime:?}: {se}");
    }
}
