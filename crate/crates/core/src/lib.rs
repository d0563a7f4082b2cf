//! Factor-based imputation of missing values in large `T × N` panels.
//!
//! The tall-wide estimator fits factors on the fully observed series (TALL),
//! loadings on the fully observed periods (WIDE), and joins the two through a
//! rotation estimated on the balanced block. The completed panel can then be
//! re-fitted by principal components, and every imputed common component comes
//! with a standard error. On top of that sit an EM baseline, a soft-threshold
//! comparison estimator, treatment-effect estimation for a block of treated
//! units, and a seeded Monte Carlo harness.
//!
//! ```
//! use fbi_tw::{panel::Panel, tw::{impute_tw, RankChoice}};
//! use nalgebra::DMatrix;
//!
//! let f = [1.0, -0.5, 2.0, 0.3, -1.2, 0.8];
//! let l = [0.5, 1.5, -1.0, 2.0, 0.7];
//! let x = DMatrix::from_fn(6, 5, |t, i| f[t] * l[i]);
//! let mut mask = DMatrix::from_element(6, 5, true);
//! mask[(5, 4)] = false;
//! let panel = Panel::with_mask(x.clone(), mask).unwrap();
//! let out = impute_tw(&panel, RankChoice::Fixed(1)).unwrap();
//! assert!((out.imputed.x_tilde[(5, 4)] - x[(5, 4)]).abs() < 1e-10);
//! ```

// `!(x > 0.0)` is used on purpose so that NaN fails validation checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod apc;
pub mod em;
pub mod error;
pub mod mc;
pub mod normal;
pub mod numerics;
pub mod panel;
pub mod par;
pub mod refit;
pub mod treatment;
pub mod tw;

pub use error::{Error, Result};
