//! Seeded Monte Carlo harness for the imputation and treatment-effect
//! estimators.
//!
//! Every replication draws from its own ChaCha stream keyed by
//! `(seed, replication, purpose)`, and results are collected by replication
//! index, so output does not depend on thread count or scheduling. Normal
//! draws use the inverse CDF on 53-bit uniforms.

use std::io::Write;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::apc::estimate_apc;
use crate::em::{impute_em, EmOptions};
use crate::error::{Error, Result};
use crate::normal::{inv_cdf, two_sided_z};
use crate::panel::{format_sig, Block, BlockPartition, Panel, ScaleMode};
use crate::par::{map_indexed, with_threads};
use crate::refit::{block_error_summary, compute_b_matrices, infer, refit, InferenceOptions};
use crate::treatment::{att_tw, AttOptions, TreatmentPanel};
use crate::tw::{impute_tw_with, BlockEstimator, RankChoice, TwOptions};

/// Stream seed for one `(seed, replication, purpose)` triple.
pub fn stream_seed(seed: u64, rep: u64, tag: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(mix(seed) ^ rep) ^ tag)
}

pub fn stream(seed: u64, rep: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, rep, tag))
}

/// Standard normal draw by inverse CDF of a uniform on the open unit interval.
pub fn std_normal(rng: &mut impl RngCore) -> f64 {
    let u = ((rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
    inv_cdf(u)
}

const TAG_FACTORS: u64 = 1;
const TAG_LOADINGS: u64 = 2;
const TAG_NOISE: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum Method {
    Full,
    Tw,
    TwUpdated,
    Em,
    Rpc,
}

impl Method {
    pub const TABLE: [Method; 4] = [Method::Full, Method::Tw, Method::TwUpdated, Method::Em];

    pub fn name(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::Tw => "tw",
            Method::TwUpdated => "tw_updated",
            Method::Em => "em",
            Method::Rpc => "rpc",
        }
    }
}

/// Where the MISS rectangle starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MissingCase {
    /// 1: `N_o = T_o = 0.6`; 2: `N_o = 0.6, T_o = 0.3`; 3: `N_o = 0.3, T_o = 0.6`;
    /// 4: `N_o = T_o = 0.3` (fractions of `N` and `T`).
    Case(u8),
    Custom {
        n_o: usize,
        t_o: usize,
    },
}

impl MissingCase {
    pub const ALL: [MissingCase; 4] =
        [MissingCase::Case(1), MissingCase::Case(2), MissingCase::Case(3), MissingCase::Case(4)];

    pub fn dims(self, n: usize, t: usize) -> Result<(usize, usize)> {
        let frac = |x: usize, f: f64| (x as f64 * f).round() as usize;
        let (n_o, t_o) = match self {
            MissingCase::Case(1) => (frac(n, 0.6), frac(t, 0.6)),
            MissingCase::Case(2) => (frac(n, 0.6), frac(t, 0.3)),
            MissingCase::Case(3) => (frac(n, 0.3), frac(t, 0.6)),
            MissingCase::Case(4) => (frac(n, 0.3), frac(t, 0.3)),
            MissingCase::Case(c) => return Err(Error::InvalidInput(format!("unknown missing-data case {c}"))),
            MissingCase::Custom { n_o, t_o } => (n_o, t_o),
        };
        if n_o == 0 || t_o == 0 || n_o >= n || t_o >= t {
            return Err(Error::InvalidInput(format!(
                "balanced block {n_o}×{t_o} must be nonempty and smaller than {n}×{t}"
            )));
        }
        Ok((n_o, t_o))
    }

    pub fn label(self) -> String {
        match self {
            MissingCase::Case(c) => c.to_string(),
            MissingCase::Custom { n_o, t_o } => format!("{n_o}x{t_o}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub n: usize,
    pub t: usize,
    pub r: usize,
    /// Factor and loading variances.
    pub diag_d: Vec<f64>,
    pub noise_var: f64,
    pub reps: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub scale_modes: Vec<ScaleMode>,
    /// Soft threshold for [`Method::Rpc`], as a fraction of each block's `D₁`.
    pub rpc_gamma_frac: f64,
    pub em: EmOptions,
    /// Worker cap, `0` = default.
    pub threads: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n: 200,
            t: 200,
            r: 2,
            diag_d: vec![1.0, 0.5],
            noise_var: 2.5,
            reps: 500,
            seed: 20_190_101,
            methods: Method::TABLE.to_vec(),
            scale_modes: vec![ScaleMode::Standardized, ScaleMode::Demeaned, ScaleMode::Raw],
            rpc_gamma_frac: 0.1,
            em: EmOptions::default(),
            threads: 0,
        }
    }
}

impl McConfig {
    fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::InvalidInput("reps must be at least 1".into()));
        }
        if self.diag_d.len() != self.r || self.r == 0 {
            return Err(Error::InvalidInput(format!("{} factor variances for r = {}", self.diag_d.len(), self.r)));
        }
        if self.diag_d.iter().any(|&d| !(d > 0.0)) || !(self.noise_var >= 0.0) {
            return Err(Error::InvalidInput("variances must be positive".into()));
        }
        Ok(())
    }
}

/// One draw of `X = F⁰Λ⁰ᵀ + e`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dgp {
    pub x: DMatrix<f64>,
    pub c0: DMatrix<f64>,
    pub f0: DMatrix<f64>,
    pub lambda0: DMatrix<f64>,
}

fn normal_matrix(rows: usize, cols: usize, sd: impl Fn(usize) -> f64, rng: &mut impl RngCore) -> DMatrix<f64> {
    // row-major fill so the stream order is independent of storage layout
    let mut m = DMatrix::zeros(rows, cols);
    for a in 0..rows {
        for b in 0..cols {
            m[(a, b)] = std_normal(rng) * sd(b);
        }
    }
    m
}

/// Rows of `F⁰` (`T × r`) and `Λ⁰` (`N × r`) i.i.d. `N(0, diag(diag_d))`,
/// `e` i.i.d. `N(0, noise_var)`.
pub fn generate_dgp(n: usize, t: usize, diag_d: &[f64], noise_var: f64, seed: u64, rep: u64) -> Dgp {
    let sd: Vec<f64> = diag_d.iter().map(|d| d.sqrt()).collect();
    let r = sd.len();
    let f0 = normal_matrix(t, r, |j| sd[j], &mut stream(seed, rep, TAG_FACTORS));
    let lambda0 = normal_matrix(n, r, |j| sd[j], &mut stream(seed, rep, TAG_LOADINGS));
    let c0 = &f0 * lambda0.transpose();
    let s = noise_var.sqrt();
    let e = normal_matrix(t, n, |_| s, &mut stream(seed, rep, TAG_NOISE));
    Dgp { x: &c0 + e, c0, f0, lambda0 }
}

pub fn generate(cfg: &McConfig, rep: usize) -> Dgp {
    generate_dgp(cfg.n, cfg.t, &cfg.diag_d, cfg.noise_var, cfg.seed, rep as u64)
}

/// Mask out the rectangle `i ≥ N_o, t ≥ T_o`.
pub fn apply_missing_case(x: &DMatrix<f64>, n_o: usize, t_o: usize) -> Result<Panel> {
    let mask = DMatrix::from_fn(x.nrows(), x.ncols(), |t, i| i < n_o || t < t_o);
    Panel::with_mask(x.clone(), mask)
}

fn partition_for(n: usize, t: usize, n_o: usize, t_o: usize) -> BlockPartition {
    BlockPartition::from_parts((0..t).collect(), (0..n).collect(), t_o, n_o).expect("identity partition")
}

/// Common component in original units from one method.
pub fn estimate_common(
    method: Method,
    x: &DMatrix<f64>,
    panel: &Panel,
    bp: &BlockPartition,
    scale: ScaleMode,
    cfg: &McConfig,
) -> Result<DMatrix<f64>> {
    let r = cfg.r;
    if method == Method::Full {
        let full = Panel::complete(x.clone())?.rescale(scale)?;
        let c = estimate_apc(full.values(), r)?.common();
        return full.scale_stats().expect("rescaled").unscale_matrix(&c);
    }
    let scaled = panel.rescale(scale)?;
    let stats = scaled.scale_stats().expect("rescaled");
    let c = match method {
        Method::Tw | Method::TwUpdated | Method::Rpc => {
            let estimator = if method == Method::Rpc {
                BlockEstimator::SoftThreshold { gamma_frac: cfg.rpc_gamma_frac }
            } else {
                BlockEstimator::Apc
            };
            let tw = impute_tw_with(&scaled, bp, &TwOptions { rank: RankChoice::Fixed(r), estimator })?;
            if method == Method::TwUpdated {
                refit(&tw.imputed, r)?.0.c_tilde
            } else {
                tw.imputed.c_tilde
            }
        }
        Method::Em => impute_em(&scaled, r, &cfg.em)?.imputed.c_tilde,
        Method::Full => unreachable!(),
    };
    stats.unscale_matrix(&c)
}

/// One replication's result; failures carry the error text for the tally.
type RepOutcome<T> = std::result::Result<T, String>;

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Blocks reported in the Frobenius table; `None` is the whole panel.
pub const TABLE1_BLOCKS: [Option<Block>; 5] =
    [None, Some(Block::Tall), Some(Block::Wide), Some(Block::Bal), Some(Block::Miss)];

fn block_name(b: Option<Block>) -> &'static str {
    b.map_or("full", Block::name)
}

fn block_extent(bp: &BlockPartition, b: Option<Block>) -> (usize, usize) {
    match b {
        None => (bp.n(), bp.t()),
        // TALL and WIDE rows cover the whole observed strip, as in the table
        Some(Block::Tall) => (bp.n_o(), bp.t()),
        Some(Block::Wide) => (bp.n(), bp.t_o()),
        Some(other) => bp.block_dims(other),
    }
}

/// `‖Ĉ − C⁰‖_F / √(cells)` over a table block.
fn table_block_error(c: &DMatrix<f64>, c0: &DMatrix<f64>, bp: &BlockPartition, b: Option<Block>) -> f64 {
    match b {
        None => block_error_summary(c, c0, bp).overall,
        Some(Block::Tall) => {
            let (n_o, t) = (bp.n_o(), bp.t());
            ((c.columns(0, n_o) - c0.columns(0, n_o)).norm_squared() / (n_o * t) as f64).sqrt()
        }
        Some(Block::Wide) => {
            let (n, t_o) = (bp.n(), bp.t_o());
            ((c.rows(0, t_o) - c0.rows(0, t_o)).norm_squared() / (n * t_o) as f64).sqrt()
        }
        Some(other) => block_error_summary(c, c0, bp).get(other),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub case: String,
    pub block: String,
    pub block_n: usize,
    pub block_t: usize,
    pub method: Method,
    pub scale: ScaleMode,
    pub median: f64,
    pub reps_ok: usize,
    pub reps_failed: usize,
}

type RepResult = Vec<std::result::Result<Vec<f64>, String>>;

/// Median normalized Frobenius errors per case, block, method and scaling.
///
/// The `tall` and `wide` rows cover the full observed strips (TALL plus BAL,
/// WIDE plus BAL), `bal` and `miss` the rectangles, `full` the whole panel.
pub fn run_table1(cfg: &McConfig, cases: &[MissingCase]) -> Result<Vec<Table1Row>> {
    cfg.validate()?;
    let dims: Vec<(usize, usize)> = cases.iter().map(|c| c.dims(cfg.n, cfg.t)).collect::<Result<_>>()?;
    let combos: Vec<(usize, Method, ScaleMode)> = (0..cases.len())
        .flat_map(|k| cfg.methods.iter().flat_map(move |&m| cfg.scale_modes.iter().map(move |&s| (k, m, s))))
        .collect();

    let per_rep: Vec<RepResult> = with_threads(cfg.threads, || {
        map_indexed(cfg.reps, |rep| {
            let dgp = generate(cfg, rep);
            // FULL does not depend on the case; compute it once per scaling
            let mut full_cache: Vec<Option<std::result::Result<DMatrix<f64>, String>>> = vec![None; 3];
            combos
                .iter()
                .map(|&(k, m, s)| {
                    let (n_o, t_o) = dims[k];
                    let bp = partition_for(cfg.n, cfg.t, n_o, t_o);
                    let c = if m == Method::Full {
                        full_cache[s.code() as usize]
                            .get_or_insert_with(|| {
                                let p = Panel::complete(dgp.x.clone()).map_err(|e| e.to_string())?;
                                estimate_common(m, &dgp.x, &p, &bp, s, cfg).map_err(|e| e.to_string())
                            })
                            .clone()
                    } else {
                        apply_missing_case(&dgp.x, n_o, t_o)
                            .and_then(|p| estimate_common(m, &dgp.x, &p, &bp, s, cfg))
                            .map_err(|e| e.to_string())
                    }?;
                    Ok(TABLE1_BLOCKS.iter().map(|&b| table_block_error(&c, &dgp.c0, &bp, b)).collect())
                })
                .collect()
        })
    });

    let mut rows = Vec::new();
    for (ci, &(k, m, s)) in combos.iter().enumerate() {
        let (n_o, t_o) = dims[k];
        let bp = partition_for(cfg.n, cfg.t, n_o, t_o);
        let mut failed = 0;
        let mut errs: Vec<Vec<f64>> = vec![Vec::new(); TABLE1_BLOCKS.len()];
        for rep in &per_rep {
            match &rep[ci] {
                Ok(v) => v.iter().enumerate().for_each(|(b, &e)| errs[b].push(e)),
                Err(msg) => {
                    failed += 1;
                    log::debug!("replication failed: {msg}");
                }
            }
        }
        for (b, block) in TABLE1_BLOCKS.iter().enumerate() {
            let (block_n, block_t) = block_extent(&bp, *block);
            let ok = errs[b].len();
            rows.push(Table1Row {
                case: cases[k].label(),
                block: block_name(*block).into(),
                block_n,
                block_t,
                method: m,
                scale: s,
                median: median(&mut errs[b]),
                reps_ok: ok,
                reps_failed: failed,
            });
        }
    }
    Ok(rows)
}

/// Midpoint cell `(i, t)` of a block.
pub fn block_midpoint(bp: &BlockPartition, b: Block) -> (usize, usize) {
    let (series, periods) = bp.block_indices(b);
    (series[series.len() / 2], periods[periods.len() / 2])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Row {
    pub case: String,
    pub block: String,
    pub i: usize,
    pub t: usize,
    pub method: Method,
    pub scale: ScaleMode,
    pub rmse: f64,
    pub reps_ok: usize,
    pub reps_failed: usize,
}

const TABLE2_BLOCKS: [Block; 4] = [Block::Tall, Block::Wide, Block::Bal, Block::Miss];

/// Root-mean-squared error of `Ĉ_it` at the midpoint of each block.
pub fn run_table2(cfg: &McConfig, cases: &[MissingCase]) -> Result<Vec<Table2Row>> {
    cfg.validate()?;
    let dims: Vec<(usize, usize)> = cases.iter().map(|c| c.dims(cfg.n, cfg.t)).collect::<Result<_>>()?;
    let combos: Vec<(usize, Method, ScaleMode)> = (0..cases.len())
        .flat_map(|k| cfg.methods.iter().flat_map(move |&m| cfg.scale_modes.iter().map(move |&s| (k, m, s))))
        .collect();
    let cells: Vec<Vec<(usize, usize)>> = dims
        .iter()
        .map(|&(n_o, t_o)| {
            let bp = partition_for(cfg.n, cfg.t, n_o, t_o);
            TABLE2_BLOCKS.iter().map(|&b| block_midpoint(&bp, b)).collect()
        })
        .collect();

    let per_rep: Vec<RepResult> = with_threads(cfg.threads, || {
        map_indexed(cfg.reps, |rep| {
            let dgp = generate(cfg, rep);
            combos
                .iter()
                .map(|&(k, m, s)| {
                    let (n_o, t_o) = dims[k];
                    let bp = partition_for(cfg.n, cfg.t, n_o, t_o);
                    let c = apply_missing_case(&dgp.x, n_o, t_o)
                        .and_then(|p| estimate_common(m, &dgp.x, &p, &bp, s, cfg))
                        .map_err(|e| e.to_string())?;
                    Ok(cells[k].iter().map(|&(i, t)| c[(t, i)] - dgp.c0[(t, i)]).collect())
                })
                .collect()
        })
    });

    let mut rows = Vec::new();
    for (ci, &(k, m, s)) in combos.iter().enumerate() {
        let mut sums = [0.0; 4];
        let (mut ok, mut failed) = (0, 0);
        for rep in &per_rep {
            match &rep[ci] {
                Ok(v) => {
                    ok += 1;
                    v.iter().enumerate().for_each(|(b, e)| sums[b] += e * e);
                }
                Err(_) => failed += 1,
            }
        }
        for (b, block) in TABLE2_BLOCKS.iter().enumerate() {
            let (i, t) = cells[k][b];
            rows.push(Table2Row {
                case: cases[k].label(),
                block: block.name().into(),
                i,
                t,
                method: m,
                scale: s,
                rmse: if ok > 0 { (sums[b] / ok as f64).sqrt() } else { f64::NAN },
                reps_ok: ok,
                reps_failed: failed,
            });
        }
    }
    Ok(rows)
}

/// Treatment-effect simulation design: `Y = F⁰Λ⁰ᵀ + θ·D + e` with
/// `e ~ N(0, noise_var)`, a constant effect and no covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttMcConfig {
    pub n1: usize,
    pub n0: usize,
    pub t0: usize,
    pub t1: usize,
    pub r: usize,
    pub diag_d: Vec<f64>,
    pub noise_var: f64,
    pub theta: f64,
    pub reps: usize,
    pub seed: u64,
    pub level: f64,
    pub refit: bool,
    pub stationary: bool,
    pub threads: usize,
    /// Post-treatment step evaluated, `s = eval_step − 1` (period `T_0 + eval_step`).
    pub eval_step: usize,
}

impl Default for AttMcConfig {
    fn default() -> Self {
        Self {
            n1: 5,
            n0: 40,
            t0: 15,
            t1: 10,
            r: 2,
            diag_d: vec![1.0, 0.5],
            noise_var: 1.0,
            theta: 1.0,
            reps: 1000,
            seed: 20_190_101,
            level: 0.95,
            refit: true,
            stationary: false,
            threads: 0,
            eval_step: 5,
        }
    }
}

/// The standard simulation grid of `(N_1, N_0, T_0)`.
pub fn table3_grid() -> Vec<(usize, usize, usize)> {
    let mut g = Vec::new();
    for n1 in [5, 20] {
        for t0 in [15, 30, 50, 100] {
            for n0 in [40, 80, 120, 200] {
                g.push((n1, n0, t0));
            }
        }
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectStats {
    pub bias: f64,
    pub rmse: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table3Row {
    pub n1: usize,
    pub n0: usize,
    pub t0: usize,
    pub theta_it: EffectStats,
    pub theta_t: EffectStats,
    pub reps_ok: usize,
    pub reps_failed: usize,
}

/// Treatment panel for one replication; treated units are the last `N_1`.
pub fn generate_treatment(cfg: &AttMcConfig, rep: u64) -> Result<TreatmentPanel> {
    let n = cfg.n0 + cfg.n1;
    let t = cfg.t0 + cfg.t1;
    let dgp = generate_dgp(n, t, &cfg.diag_d, cfg.noise_var, cfg.seed, rep);
    let treated: Vec<bool> = (0..n).map(|i| i >= cfg.n0).collect();
    let y = DMatrix::from_fn(t, n, |s, i| dgp.x[(s, i)] + if treated[i] && s >= cfg.t0 { cfg.theta } else { 0.0 });
    TreatmentPanel::unlabeled(y, vec![], treated, cfg.t0)
}

fn effect_stats(draws: &[(f64, f64)], truth: f64, z: f64) -> EffectStats {
    let n = draws.len() as f64;
    let bias = draws.iter().map(|(v, _)| v - truth).sum::<f64>() / n;
    let rmse = (draws.iter().map(|(v, _)| (v - truth).powi(2)).sum::<f64>() / n).sqrt();
    let coverage = draws.iter().filter(|(v, se)| (v - truth).abs() <= z * se).count() as f64 / n;
    EffectStats { bias, rmse, coverage }
}

/// Bias, RMSE and interval coverage of `θ̂_it` at the first treated unit and of
/// `θ̂_t`, both at period `T_0 + eval_step`.
pub fn run_table3_row(cfg: &AttMcConfig) -> Result<Table3Row> {
    if cfg.eval_step == 0 || cfg.eval_step > cfg.t1 {
        return Err(Error::InvalidInput(format!("evaluation step {} outside 1..={}", cfg.eval_step, cfg.t1)));
    }
    let s = cfg.eval_step - 1;
    let opts = AttOptions {
        rank: RankChoice::Fixed(cfg.r),
        refit: cfg.refit,
        level: cfg.level,
        stationary: cfg.stationary,
        ..Default::default()
    };
    // per replication: (estimate, se) for the individual and the average effect
    let draws: Vec<RepOutcome<[(f64, f64); 2]>> = with_threads(cfg.threads, || {
        map_indexed(cfg.reps, |rep| {
            let tp = generate_treatment(cfg, rep as u64).map_err(|e| e.to_string())?;
            let res = att_tw(&tp, &opts).map_err(|e| e.to_string())?;
            let it = res.theta_it[(s, 0)];
            let at = res.theta_t[s];
            Ok([(it.value, it.se), (at.value, at.se)])
        })
    });
    let ok: Vec<_> = draws.iter().filter_map(|d| d.as_ref().ok()).collect();
    let failed = draws.len() - ok.len();
    if ok.is_empty() {
        return Err(Error::InsufficientData("every replication failed".into()));
    }
    let z = two_sided_z(cfg.level);
    let it: Vec<(f64, f64)> = ok.iter().map(|d| d[0]).collect();
    let at: Vec<(f64, f64)> = ok.iter().map(|d| d[1]).collect();
    Ok(Table3Row {
        n1: cfg.n1,
        n0: cfg.n0,
        t0: cfg.t0,
        theta_it: effect_stats(&it, cfg.theta, z),
        theta_t: effect_stats(&at, cfg.theta, z),
        reps_ok: ok.len(),
        reps_failed: failed,
    })
}

pub fn run_table3(base: &AttMcConfig, grid: &[(usize, usize, usize)]) -> Result<Vec<Table3Row>> {
    grid.iter().map(|&(n1, n0, t0)| run_table3_row(&AttMcConfig { n1, n0, t0, ..base.clone() })).collect()
}

/// Interval calibration on one block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageSummary {
    pub coverage: f64,
    /// Median interval width `2·z·se` over cells and replications.
    pub median_width: f64,
    pub cells: usize,
    pub reps_ok: usize,
    pub reps_failed: usize,
}

/// Share of intervals for `C⁰_it` on `block` that contain the truth, with
/// raw data and the rank fixed at `cfg.r`.
pub fn run_coverage(
    cfg: &McConfig,
    case: MissingCase,
    block: Block,
    opts: &InferenceOptions,
    hac_lags: usize,
) -> Result<CoverageSummary> {
    cfg.validate()?;
    let (n_o, t_o) = case.dims(cfg.n, cfg.t)?;
    let bp = partition_for(cfg.n, cfg.t, n_o, t_o);
    let z = two_sided_z(opts.level);
    let per_rep: Vec<RepOutcome<(usize, usize, Vec<f64>)>> = with_threads(cfg.threads, || {
        map_indexed(cfg.reps, |rep| {
            let dgp = generate(cfg, rep);
            let p = apply_missing_case(&dgp.x, n_o, t_o).map_err(|e| e.to_string())?;
            let tw = impute_tw_with(&p, &bp, &TwOptions::fixed(cfg.r)).map_err(|e| e.to_string())?;
            let out = infer(&tw.imputed, cfg.r, hac_lags, opts).map_err(|e| e.to_string())?;
            let (series, periods) = bp.block_indices(block);
            let (mut hit, mut total) = (0, 0);
            let mut widths = Vec::with_capacity(series.len() * periods.len());
            for &i in series {
                for &t in periods {
                    let c = out.cells[(t, i)];
                    total += 1;
                    if (c.c_hat - dgp.c0[(t, i)]).abs() <= z * c.se {
                        hit += 1;
                    }
                    widths.push(c.ci_high - c.ci_low);
                }
            }
            Ok((hit, total, widths))
        })
    });
    let (mut hit, mut total, mut widths, mut failed) = (0, 0, Vec::new(), 0);
    for r in per_rep {
        match r {
            Ok((h, n, w)) => {
                hit += h;
                total += n;
                widths.extend(w);
            }
            Err(_) => failed += 1,
        }
    }
    Ok(CoverageSummary {
        coverage: hit as f64 / total.max(1) as f64,
        median_width: median(&mut widths),
        cells: total,
        reps_ok: cfg.reps - failed,
        reps_failed: failed,
    })
}

/// `‖B_Λ − I‖_F` and `‖B_F − I‖_F` per replication after a tall-wide refit.
pub fn run_b_matrix_norms(cfg: &McConfig, case: MissingCase) -> Result<Vec<(f64, f64)>> {
    cfg.validate()?;
    let (n_o, t_o) = case.dims(cfg.n, cfg.t)?;
    let bp = partition_for(cfg.n, cfg.t, n_o, t_o);
    let out: Vec<Result<(f64, f64)>> = with_threads(cfg.threads, || {
        map_indexed(cfg.reps, |rep| {
            let dgp = generate(cfg, rep);
            let p = apply_missing_case(&dgp.x, n_o, t_o)?;
            let tw = impute_tw_with(&p, &bp, &TwOptions::fixed(cfg.r))?;
            let (_, fm) = refit(&tw.imputed, cfg.r)?;
            let (bl, bf) = compute_b_matrices(&fm, &bp)?;
            let id = DMatrix::identity(cfg.r, cfg.r);
            Ok(((bl - &id).norm(), (bf - id).norm()))
        })
    });
    out.into_iter().collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidInput(format!("CSV write failed: {e}"))
}

pub fn write_table1_csv<W: Write>(w: W, rows: &[Table1Row]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["case", "block", "N", "T", "method", "scale", "median_error", "reps_ok", "reps_failed"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.case.clone(),
            r.block.clone(),
            r.block_n.to_string(),
            r.block_t.to_string(),
            r.method.name().into(),
            r.scale.code().to_string(),
            format_sig(r.median, 12),
            r.reps_ok.to_string(),
            r.reps_failed.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::InvalidInput(e.to_string()))
}

pub fn write_table2_csv<W: Write>(w: W, rows: &[Table2Row]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["case", "block", "i", "t", "method", "scale", "rmse", "reps_ok", "reps_failed"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.case.clone(),
            r.block.clone(),
            (r.i + 1).to_string(),
            (r.t + 1).to_string(),
            r.method.name().into(),
            r.scale.code().to_string(),
            format_sig(r.rmse, 12),
            r.reps_ok.to_string(),
            r.reps_failed.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::InvalidInput(e.to_string()))
}

pub fn write_table3_csv<W: Write>(w: W, rows: &[Table3Row]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record([
        "N1",
        "N0",
        "T0",
        "it_bias",
        "it_rmse",
        "it_covr",
        "t_bias",
        "t_rmse",
        "t_covr",
        "reps_ok",
        "reps_failed",
    ])
    .map_err(csv_err)?;
    for r in rows {
        let f = |x: f64| format_sig(x, 12);
        w.write_record([
            r.n1.to_string(),
            r.n0.to_string(),
            r.t0.to_string(),
            f(r.theta_it.bias),
            f(r.theta_it.rmse),
            f(r.theta_it.coverage),
            f(r.theta_t.bias),
            f(r.theta_t.rmse),
            f(r.theta_t.coverage),
            r.reps_ok.to_string(),
            r.reps_failed.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::InvalidInput(e.to_string()))
}

/// Run description written next to the tables.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub table: u8,
    pub config: serde_json::Value,
    pub wall_seconds: f64,
}

impl RunManifest {
    pub fn new(table: u8, config: &impl Serialize, started: Instant) -> Self {
        Self {
            version: format!("{}-{}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
            table,
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            wall_seconds: started.elapsed().as_secs_f64(),
        }
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self).map_err(|e| Error::InvalidInput(format!("manifest write failed: {e}")))
    }
}
