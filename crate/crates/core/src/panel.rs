//! Panels with an observation mask, per-series scaling, CSV I/O, and the
//! block rearrangement that puts fully observed series and periods first.
//!
//! Matrices are stored `T × N`: row `t` is a period, column `i` a series.
//! Functions that take a cell take it as `(i, t)`.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MISSING: &str = "NA";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum ScaleMode {
    Raw = 0,
    Demeaned = 1,
    Standardized = 2,
}

impl ScaleMode {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(ScaleMode::Raw),
            1 => Ok(ScaleMode::Demeaned),
            2 => Ok(ScaleMode::Standardized),
            other => Err(Error::InvalidInput(format!("unknown scale mode {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesStats {
    pub mean: f64,
    pub std: f64,
}

/// Affine maps applied by [`Panel::rescale`], one per series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleStats {
    pub mode: ScaleMode,
    pub series: Vec<SeriesStats>,
}

impl ScaleStats {
    fn shift_and_spread(&self, i: usize) -> (f64, f64) {
        let s = self.series[i];
        match self.mode {
            ScaleMode::Raw => (0.0, 1.0),
            ScaleMode::Demeaned => (s.mean, 1.0),
            ScaleMode::Standardized => (s.mean, s.std),
        }
    }

    /// Map a `T × N` matrix in scaled units (data, imputations or common
    /// components) back to original units.
    pub fn unscale_matrix(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_width(m.ncols())?;
        let mut out = m.clone();
        for (i, mut col) in out.column_iter_mut().enumerate() {
            let (shift, spread) = self.shift_and_spread(i);
            col.apply(|v| *v = *v * spread + shift);
        }
        Ok(out)
    }

    /// Map a standard error (or any scale quantity) of series `i` back to
    /// original units.
    pub fn unscale_spread(&self, i: usize, se: f64) -> f64 {
        se * self.shift_and_spread(i).1
    }

    pub fn unscale_value(&self, i: usize, v: f64) -> f64 {
        let (shift, spread) = self.shift_and_spread(i);
        v * spread + shift
    }

    fn check_width(&self, n: usize) -> Result<()> {
        if n != self.series.len() {
            return Err(Error::StateError(format!(
                "scale statistics cover {} series, matrix has {n}",
                self.series.len()
            )));
        }
        Ok(())
    }
}

/// A `T × N` panel with observation mask (`true` = observed).
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    values: DMatrix<f64>,
    mask: DMatrix<bool>,
    series_ids: Vec<String>,
    period_ids: Vec<String>,
    scale: Option<ScaleStats>,
}

impl Panel {
    /// Unobserved entries of `values` are ignored and stored as NaN.
    pub fn new(
        values: DMatrix<f64>,
        mask: DMatrix<bool>,
        series_ids: Vec<String>,
        period_ids: Vec<String>,
    ) -> Result<Self> {
        let (t, n) = values.shape();
        if mask.shape() != (t, n) {
            return Err(Error::InvalidInput(format!("mask is {:?} but values are {:?}", mask.shape(), (t, n))));
        }
        if series_ids.len() != n || period_ids.len() != t {
            return Err(Error::InvalidInput(format!(
                "{} series ids and {} period ids for a {t}×{n} panel",
                series_ids.len(),
                period_ids.len()
            )));
        }
        if t == 0 || n == 0 {
            return Err(Error::InvalidInput("panel is empty".into()));
        }
        let mut values = values;
        for i in 0..n {
            let mut seen = false;
            for tt in 0..t {
                if mask[(tt, i)] {
                    seen = true;
                    if !values[(tt, i)].is_finite() {
                        return Err(Error::InvalidInput(format!(
                            "observed value of `{}` at `{}` is not finite",
                            series_ids[i], period_ids[tt]
                        )));
                    }
                } else {
                    values[(tt, i)] = f64::NAN;
                }
            }
            if !seen {
                return Err(Error::EmptySeries(series_ids[i].clone()));
            }
        }
        Ok(Self { values, mask, series_ids, period_ids, scale: None })
    }

    /// Fully observed panel with generated ids.
    pub fn complete(values: DMatrix<f64>) -> Result<Self> {
        let mask = DMatrix::from_element(values.nrows(), values.ncols(), true);
        Self::with_mask(values, mask)
    }

    /// Panel with generated ids (`s1..sN`, `1..T`).
    pub fn with_mask(values: DMatrix<f64>, mask: DMatrix<bool>) -> Result<Self> {
        let series = (1..=values.ncols()).map(|i| format!("s{i}")).collect();
        let periods = (1..=values.nrows()).map(|t| t.to_string()).collect();
        Self::new(values, mask, series, periods)
    }

    pub fn t(&self) -> usize {
        self.values.nrows()
    }

    pub fn n(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn mask(&self) -> &DMatrix<bool> {
        &self.mask
    }

    pub fn is_observed(&self, i: usize, t: usize) -> bool {
        self.mask[(t, i)]
    }

    pub fn n_missing(&self) -> usize {
        self.mask.iter().filter(|&&m| !m).count()
    }

    pub fn series_ids(&self) -> &[String] {
        &self.series_ids
    }

    pub fn period_ids(&self) -> &[String] {
        &self.period_ids
    }

    pub fn scale_mode(&self) -> ScaleMode {
        self.scale.as_ref().map_or(ScaleMode::Raw, |s| s.mode)
    }

    pub fn scale_stats(&self) -> Option<&ScaleStats> {
        self.scale.as_ref()
    }

    /// Copy of the panel with the given values in place of the observed ones.
    /// Used to carry ids and mask over to derived matrices.
    pub fn with_values(&self, values: DMatrix<f64>) -> Result<Self> {
        let mut p = Self::new(values, self.mask.clone(), self.series_ids.clone(), self.period_ids.clone())?;
        p.scale = self.scale.clone();
        Ok(p)
    }

    /// Per-series mean (and, for standardization, sample std with `n − 1`
    /// denominator) over observed entries only.
    pub fn rescale(&self, mode: ScaleMode) -> Result<Panel> {
        if self.scale.is_some() {
            return Err(Error::StateError("panel is already rescaled".into()));
        }
        let (t, n) = (self.t(), self.n());
        let mut stats = Vec::with_capacity(n);
        for i in 0..n {
            let obs: Vec<f64> = (0..t).filter(|&tt| self.mask[(tt, i)]).map(|tt| self.values[(tt, i)]).collect();
            let mean = obs.iter().sum::<f64>() / obs.len() as f64;
            let std = if obs.len() >= 2 {
                (obs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (obs.len() - 1) as f64).sqrt()
            } else {
                0.0
            };
            if mode == ScaleMode::Standardized && !(std > 0.0) {
                return Err(Error::DegenerateSeries(self.series_ids[i].clone()));
            }
            stats.push(SeriesStats { mean, std });
        }
        let scale = ScaleStats { mode, series: stats };
        let mut values = self.values.clone();
        for (i, mut col) in values.column_iter_mut().enumerate() {
            let (shift, spread) = scale.shift_and_spread(i);
            col.apply(|v| *v = (*v - shift) / spread);
        }
        Ok(Panel {
            values,
            mask: self.mask.clone(),
            series_ids: self.series_ids.clone(),
            period_ids: self.period_ids.clone(),
            scale: Some(scale),
        })
    }

    /// Inverse of [`Panel::rescale`].
    pub fn unscale(&self) -> Result<Panel> {
        let scale = self.scale.as_ref().ok_or_else(|| Error::StateError("panel carries no scale statistics".into()))?;
        let values = scale.unscale_matrix(&self.values)?;
        Ok(Panel {
            values,
            mask: self.mask.clone(),
            series_ids: self.series_ids.clone(),
            period_ids: self.period_ids.clone(),
            scale: None,
        })
    }

    /// Header row of series ids, first column of period ids; cells equal to
    /// `missing` or empty are unobserved.
    pub fn read_csv<R: Read>(reader: R, missing: &str) -> Result<Panel> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(reader);
        let mut records = rdr.records();
        let header = match records.next() {
            Some(rec) => rec.map_err(|e| Error::ParseError(e.to_string()))?,
            None => return Err(Error::ParseError("empty CSV".into())),
        };
        let width = header.len();
        if width < 2 {
            return Err(Error::ParseError("CSV needs a period column and at least one series".into()));
        }
        let series_ids: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
        let n = series_ids.len();
        let mut period_ids = Vec::new();
        let mut cells = Vec::new();
        let mut observed = Vec::new();
        for (line, rec) in records.enumerate() {
            let rec = rec.map_err(|e| Error::ParseError(e.to_string()))?;
            if rec.len() != width {
                return Err(Error::ParseError(format!(
                    "row {} has {} fields, header has {width}",
                    line + 2,
                    rec.len()
                )));
            }
            period_ids.push(rec[0].trim().to_string());
            for (k, field) in rec.iter().skip(1).enumerate() {
                let field = field.trim();
                if field.is_empty() || field == missing {
                    cells.push(f64::NAN);
                    observed.push(false);
                } else {
                    let v: f64 = field.parse().map_err(|_| {
                        Error::ParseError(format!(
                            "row {}, series `{}`: `{field}` is not a number",
                            line + 2,
                            series_ids[k]
                        ))
                    })?;
                    cells.push(v);
                    observed.push(true);
                }
            }
        }
        let t = period_ids.len();
        if t == 0 {
            return Err(Error::ParseError("CSV has no data rows".into()));
        }
        let values = DMatrix::from_row_slice(t, n, &cells);
        let mask = DMatrix::from_row_slice(t, n, &observed);
        Panel::new(values, mask, series_ids, period_ids)
    }

    pub fn load_csv(path: impl AsRef<Path>, missing: &str) -> Result<Panel> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        Panel::read_csv(std::io::BufReader::new(file), missing)
    }

    /// Writes observed values, `NA` elsewhere.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let cells = DMatrix::from_fn(self.t(), self.n(), |t, i| self.mask[(t, i)].then(|| self.values[(t, i)]));
        write_matrix_csv(writer, &cells, &self.series_ids, &self.period_ids)
    }
}

/// `%.12g`-style formatting: 12 significant digits, trailing zeros trimmed.
pub fn format_sig(x: f64, digits: usize) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, x);
    let (mant, exp) = sci.split_once('e').expect("exponent format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -5 || exp >= digits as i32 {
        format!("{}e{exp}", trim_zeros(mant))
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Write a `T × N` matrix in the panel CSV layout; `None` cells become `NA`.
pub fn write_matrix_csv<W: Write>(
    writer: W,
    cells: &DMatrix<Option<f64>>,
    series_ids: &[String],
    period_ids: &[String],
) -> Result<()> {
    let io = |e: csv::Error| Error::InvalidInput(format!("CSV write failed: {e}"));
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![String::from("period")];
    header.extend(series_ids.iter().cloned());
    w.write_record(&header).map_err(io)?;
    for t in 0..cells.nrows() {
        let mut row = vec![period_ids[t].clone()];
        row.extend((0..cells.ncols()).map(|i| match cells[(t, i)] {
            Some(v) => format_sig(v, 12),
            None => DEFAULT_MISSING.to_string(),
        }));
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::InvalidInput(format!("CSV write failed: {e}")))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Block {
    Bal,
    Tall,
    Wide,
    Miss,
}

impl Block {
    pub const ALL: [Block; 4] = [Block::Bal, Block::Tall, Block::Wide, Block::Miss];

    pub fn name(self) -> &'static str {
        match self {
            Block::Bal => "bal",
            Block::Tall => "tall",
            Block::Wide => "wide",
            Block::Miss => "miss",
        }
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Row and column orderings that put fully observed periods and series first.
///
/// After permutation the panel splits into BAL (`i < N_o, t < T_o`), TALL
/// (`i < N_o, t ≥ T_o`), WIDE (`i ≥ N_o, t < T_o`) and MISS (the rest).
/// Indices are 0-based; `col_perm[k]` is the original column at position `k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPartition {
    row_perm: Vec<usize>,
    col_perm: Vec<usize>,
    row_pos: Vec<usize>,
    col_pos: Vec<usize>,
    t_o: usize,
    n_o: usize,
}

fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    inv
}

impl BlockPartition {
    /// Partition from explicit permutations; mostly for tests and for
    /// designs where the ordering is known up front.
    pub fn from_parts(row_perm: Vec<usize>, col_perm: Vec<usize>, t_o: usize, n_o: usize) -> Result<Self> {
        for (perm, what) in [(&row_perm, "row"), (&col_perm, "column")] {
            let mut seen = vec![false; perm.len()];
            for &p in perm.iter() {
                if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                    return Err(Error::InvalidInput(format!("{what} permutation is not a bijection")));
                }
            }
        }
        if t_o > row_perm.len() || n_o > col_perm.len() {
            return Err(Error::InvalidInput("balanced block larger than panel".into()));
        }
        let row_pos = inverse(&row_perm);
        let col_pos = inverse(&col_perm);
        Ok(Self { row_perm, col_perm, row_pos, col_pos, t_o, n_o })
    }

    pub fn t(&self) -> usize {
        self.row_perm.len()
    }
    pub fn n(&self) -> usize {
        self.col_perm.len()
    }
    pub fn t_o(&self) -> usize {
        self.t_o
    }
    pub fn n_o(&self) -> usize {
        self.n_o
    }
    pub fn t_m(&self) -> usize {
        self.t() - self.t_o
    }
    pub fn n_m(&self) -> usize {
        self.n() - self.n_o
    }
    pub fn row_perm(&self) -> &[usize] {
        &self.row_perm
    }
    pub fn col_perm(&self) -> &[usize] {
        &self.col_perm
    }

    /// Original indices of fully observed series.
    pub fn observed_series(&self) -> &[usize] {
        &self.col_perm[..self.n_o]
    }
    pub fn other_series(&self) -> &[usize] {
        &self.col_perm[self.n_o..]
    }
    /// Original indices of fully observed periods.
    pub fn observed_periods(&self) -> &[usize] {
        &self.row_perm[..self.t_o]
    }
    pub fn other_periods(&self) -> &[usize] {
        &self.row_perm[self.t_o..]
    }

    /// Position of original cell `(i, t)` after permutation.
    pub fn position(&self, i: usize, t: usize) -> (usize, usize) {
        (self.col_pos[i], self.row_pos[t])
    }

    /// Block of the cell at permuted position `(pi, pt)`.
    pub fn block_at(&self, pi: usize, pt: usize) -> Block {
        match (pi < self.n_o, pt < self.t_o) {
            (true, true) => Block::Bal,
            (true, false) => Block::Tall,
            (false, true) => Block::Wide,
            (false, false) => Block::Miss,
        }
    }

    /// Block of original cell `(i, t)`.
    pub fn block_of(&self, i: usize, t: usize) -> Block {
        let (pi, pt) = self.position(i, t);
        self.block_at(pi, pt)
    }

    /// `(series, periods)` extent of a block.
    pub fn block_dims(&self, b: Block) -> (usize, usize) {
        match b {
            Block::Bal => (self.n_o, self.t_o),
            Block::Tall => (self.n_o, self.t_m()),
            Block::Wide => (self.n_m(), self.t_o),
            Block::Miss => (self.n_m(), self.t_m()),
        }
    }

    /// Original `(series, periods)` index sets of a block.
    pub fn block_indices(&self, b: Block) -> (&[usize], &[usize]) {
        match b {
            Block::Bal => (self.observed_series(), self.observed_periods()),
            Block::Tall => (self.observed_series(), self.other_periods()),
            Block::Wide => (self.other_series(), self.observed_periods()),
            Block::Miss => (self.other_series(), self.other_periods()),
        }
    }

    /// Reorder a `T × N` matrix into partition order.
    pub fn permute<T: nalgebra::Scalar>(&self, m: &DMatrix<T>) -> DMatrix<T> {
        DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(self.row_perm[r], self.col_perm[c])].clone())
    }

    /// Undo [`BlockPartition::permute`].
    pub fn unpermute<T: nalgebra::Scalar>(&self, m: &DMatrix<T>) -> DMatrix<T> {
        DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(self.row_pos[r], self.col_pos[c])].clone())
    }
}

/// Stable two-pass shuffle: fully observed series first, then periods
/// observed for every series first. Original order is kept within groups.
pub fn partition_blocks(p: &Panel) -> Result<BlockPartition> {
    let (t, n) = (p.t(), p.n());
    let mask = p.mask();
    let full_col: Vec<bool> = (0..n).map(|i| (0..t).all(|tt| mask[(tt, i)])).collect();
    let full_row: Vec<bool> = (0..t).map(|tt| (0..n).all(|i| mask[(tt, i)])).collect();

    let col_perm: Vec<usize> = (0..n).filter(|&i| full_col[i]).chain((0..n).filter(|&i| !full_col[i])).collect();
    let row_perm: Vec<usize> = (0..t).filter(|&r| full_row[r]).chain((0..t).filter(|&r| !full_row[r])).collect();
    let n_o = full_col.iter().filter(|&&f| f).count();
    let t_o = full_row.iter().filter(|&&f| f).count();
    if n_o == 0 {
        return Err(Error::NoBalancedBlock("no series is observed in every period".into()));
    }
    if t_o == 0 {
        return Err(Error::NoBalancedBlock("no period is observed for every series".into()));
    }
    BlockPartition::from_parts(row_perm, col_perm, t_o, n_o)
}

/// Outcome of the two rank-identification order conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OrderConditions {
    /// `T·N_o > r(T + N_o)`
    pub tall: bool,
    /// `T_o·N > r(T_o + N)`
    pub wide: bool,
}

impl OrderConditions {
    pub fn ok(&self) -> bool {
        self.tall && self.wide
    }

    pub fn violations(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if !self.tall {
            v.push("T·N_o > r(T+N_o)");
        }
        if !self.wide {
            v.push("T_o·N > r(T_o+N)");
        }
        v
    }
}

pub fn check_order_conditions(bp: &BlockPartition, r: usize) -> OrderConditions {
    order_conditions(bp.t(), bp.n(), bp.t_o(), bp.n_o(), r)
}

pub fn order_conditions(t: usize, n: usize, t_o: usize, n_o: usize, r: usize) -> OrderConditions {
    OrderConditions { tall: t * n_o > r * (t + n_o), wide: t_o * n > r * (t_o + n) }
}
