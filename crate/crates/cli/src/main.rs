use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;

use fbi_tw::apc::select_r;
use fbi_tw::em::{impute_em, EmOptions};
use fbi_tw::mc::{self, AttMcConfig, McConfig, MissingCase, RunManifest};
use fbi_tw::normal::two_sided_z;
use fbi_tw::panel::{format_sig, partition_blocks, write_matrix_csv, Panel, ScaleMode};
use fbi_tw::par::threads_from_env;
use fbi_tw::refit::{infer, InferenceOptions, Regime};
use fbi_tw::treatment::{att_tw, AttOptions, Estimate, TreatmentPanel};
use fbi_tw::tw::{impute_tw_with, BlockEstimator, RankChoice, TwOptions, DEFAULT_R_MAX};
use fbi_tw::{Error, Result};

const EXIT_INPUT: u8 = 2;
const EXIT_ESTIMATION: u8 = 3;
const EXIT_USAGE: u8 = 64;

#[derive(Parser, Debug)]
#[command(name = "fbi-tw", version, about = "Tall-wide imputation and treatment effects for factor panels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Impute missing cells of a panel and attach confidence intervals.
    Impute(ImputeArgs),
    /// Treatment effects on the treated from a control-group factor model.
    Att(AttArgs),
    /// Monte Carlo tables.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Tw,
    TwUpdated,
    Em,
    Rpc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum RankArg {
    Fixed(usize),
    Auto,
}

fn parse_rank(s: &str) -> std::result::Result<RankArg, String> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(RankArg::Auto);
    }
    match s.parse::<usize>() {
        Ok(r) if r > 0 => Ok(RankArg::Fixed(r)),
        _ => Err(format!("expected a positive integer or `auto`, got `{s}`")),
    }
}

fn parse_scale(s: &str) -> std::result::Result<ScaleMode, String> {
    s.parse::<u8>()
        .ok()
        .and_then(|c| ScaleMode::from_code(c).ok())
        .ok_or_else(|| format!("scale must be 0, 1 or 2, got `{s}`"))
}

fn parse_level(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(l) if l > 0.0 && l < 1.0 => Ok(l),
        _ => Err(format!("confidence level must lie in (0, 1), got `{s}`")),
    }
}

impl RankArg {
    fn choice(self) -> RankChoice {
        match self {
            RankArg::Fixed(r) => RankChoice::Fixed(r),
            RankArg::Auto => RankChoice::auto(),
        }
    }
}

#[derive(Args, Debug)]
struct ImputeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodArg::Tw)]
    method: MethodArg,
    #[arg(long = "r", value_parser = parse_rank, default_value = "auto")]
    rank: RankArg,
    /// 0 raw, 1 demeaned, 2 standardized.
    #[arg(long, value_parser = parse_scale, default_value = "0")]
    scale: ScaleMode,
    #[arg(long, value_parser = parse_level, default_value_t = 0.95)]
    ci: f64,
    #[arg(long, default_value_t = 0)]
    hac_lags: usize,
    #[arg(long, action = ArgAction::Set, default_value_t = false)]
    stationary: bool,
    /// Missing-value sentinel in the input.
    #[arg(long, default_value = "NA")]
    missing: String,
    /// Soft threshold for `rpc`, as a fraction of the largest singular value.
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AttArgs {
    #[arg(long)]
    outcomes: PathBuf,
    /// CSV with columns `unit_id,treated`.
    #[arg(long)]
    assign: PathBuf,
    #[arg(long)]
    t0: usize,
    #[arg(long = "r", value_parser = parse_rank, default_value = "1")]
    rank: RankArg,
    /// One panel CSV per covariate, laid out like the outcomes.
    #[arg(long, num_args = 1..)]
    covariates: Vec<PathBuf>,
    #[arg(long, action = ArgAction::Set, default_value_t = true)]
    refit: bool,
    #[arg(long, value_parser = parse_level, default_value_t = 0.95)]
    ci: f64,
    #[arg(long, action = ArgAction::Set, default_value_t = false)]
    stationary: bool,
    #[arg(long, default_value_t = 0)]
    hac_lags: usize,
    #[arg(long, default_value = "att")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    table: u8,
    /// Missing-data case 1-4 or `all`.
    #[arg(long, default_value = "all")]
    case: String,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long, default_value_t = 20_190_101)]
    seed: u64,
    /// Scalings to run for tables 1 and 2 (comma separated codes).
    #[arg(long, value_delimiter = ',', value_parser = parse_scale, default_value = "2,1,0")]
    scales: Vec<ScaleMode>,
    /// Single `N1,N0,T0` row of the treatment table instead of the full grid.
    #[arg(long, value_delimiter = ',')]
    grid_row: Option<Vec<usize>>,
    #[arg(long)]
    out: PathBuf,
}

fn prefixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn write_err(e: csv::Error) -> Error {
    Error::InvalidInput(format!("CSV write failed: {e}"))
}

fn cmd_impute(a: &ImputeArgs) -> Result<()> {
    let raw = Panel::load_csv(&a.input, &a.missing)?;
    let panel = raw.rescale(a.scale)?;
    let stats = panel.scale_stats().expect("rescaled panel carries stats").clone();
    let bp = partition_blocks(&panel)?;
    let estimator = match a.method {
        MethodArg::Rpc => BlockEstimator::SoftThreshold { gamma_frac: a.gamma },
        _ => BlockEstimator::Apc,
    };

    let (c_tilde, cells) = match a.method {
        MethodArg::Tw | MethodArg::TwUpdated | MethodArg::Rpc => {
            let tw = impute_tw_with(&panel, &bp, &TwOptions { rank: a.rank.choice(), estimator })?;
            let regime = if a.method == MethodArg::TwUpdated { Regime::Refit } else { Regime::TallWide };
            let opts = InferenceOptions { level: a.ci, regime, stationary: a.stationary };
            let out = infer(&tw.imputed, tw.estimate.r, a.hac_lags, &opts)?;
            (out.imputed.c_tilde, Some(out.cells))
        }
        MethodArg::Em => {
            let r = match a.rank {
                RankArg::Fixed(r) => r,
                RankArg::Auto => {
                    let tw = impute_tw_with(&panel, &bp, &TwOptions { rank: RankChoice::auto(), estimator })?;
                    let x = &tw.imputed.x_tilde;
                    select_r(x, DEFAULT_R_MAX.min(x.nrows().min(x.ncols()) / 2))?
                }
            };
            let em = impute_em(&panel, r, &EmOptions::default())?;
            if !em.converged {
                log::warn!("EM did not converge in {} iterations", em.iterations);
            }
            (em.imputed.c_tilde, None)
        }
    };

    let c = stats.unscale_matrix(&c_tilde)?;
    let (t, n) = (raw.t(), raw.n());
    let xtilde =
        DMatrix::from_fn(t, n, |tt, i| Some(if raw.is_observed(i, tt) { raw.values()[(tt, i)] } else { c[(tt, i)] }));
    let chat = c.map(Some);
    write_matrix_csv(create(&prefixed(&a.out, "_xtilde.csv"))?, &xtilde, raw.series_ids(), raw.period_ids())?;
    write_matrix_csv(create(&prefixed(&a.out, "_chat.csv"))?, &chat, raw.series_ids(), raw.period_ids())?;

    let z = two_sided_z(a.ci);
    let mut w = csv::Writer::from_writer(create(&prefixed(&a.out, "_inference.csv"))?);
    w.write_record(["i", "t", "block", "delta", "C_hat", "se", "ci_low", "ci_high"]).map_err(write_err)?;
    for i in 0..n {
        for tt in 0..t {
            let block = bp.block_of(i, tt);
            let c_hat = c[(tt, i)];
            let (delta, se, lo, hi) = match &cells {
                Some(cells) => {
                    let cell = cells[(tt, i)];
                    let se = stats.unscale_spread(i, cell.se);
                    let f = |x: f64| format_sig(x, 12);
                    (f(cell.delta), f(se), f(c_hat - z * se), f(c_hat + z * se))
                }
                None => ("NA".into(), "NA".into(), "NA".into(), "NA".into()),
            };
            w.write_record([
                raw.series_ids()[i].as_str(),
                raw.period_ids()[tt].as_str(),
                block.name(),
                &delta,
                &format_sig(c_hat, 12),
                &se,
                &lo,
                &hi,
            ])
            .map_err(write_err)?;
        }
    }
    w.flush().map_err(|e| Error::InvalidInput(format!("CSV write failed: {e}")))?;
    log::info!("imputed {} cells of a {t}×{n} panel", raw.n_missing());
    Ok(())
}

fn read_assignment(path: &Path, unit_ids: &[String]) -> Result<Vec<bool>> {
    let file = File::open(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    let mut rdr = csv::Reader::from_reader(file);
    let headers = rdr.headers().map_err(|e| Error::ParseError(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::ParseError(format!("assignment file lacks a `{name}` column")))
    };
    let (id_col, d_col) = (col("unit_id")?, col("treated")?);
    let mut treated: Vec<Option<bool>> = vec![None; unit_ids.len()];
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::ParseError(e.to_string()))?;
        let id = rec.get(id_col).unwrap_or("").trim();
        let d = match rec.get(d_col).unwrap_or("").trim() {
            "1" => true,
            "0" => false,
            other => return Err(Error::ParseError(format!("row {}: treated must be 0 or 1, got `{other}`", line + 2))),
        };
        let pos = unit_ids
            .iter()
            .position(|u| u == id)
            .ok_or_else(|| Error::InvalidInput(format!("unit `{id}` in the assignment file is not in the outcomes")))?;
        if treated[pos].replace(d).is_some() {
            return Err(Error::InvalidInput(format!("unit `{id}` is assigned twice")));
        }
    }
    treated
        .iter()
        .zip(unit_ids)
        .map(|(d, id)| d.ok_or_else(|| Error::InvalidInput(format!("unit `{id}` has no assignment"))))
        .collect()
}

fn estimate_record(label: Vec<String>, e: &Estimate) -> Vec<String> {
    let mut row = label;
    row.extend([e.value, e.se, e.ci_low, e.ci_high].map(|x| format_sig(x, 12)));
    row
}

fn cmd_att(a: &AttArgs) -> Result<()> {
    let outcomes = Panel::load_csv(&a.outcomes, "NA")?;
    let treated = read_assignment(&a.assign, outcomes.series_ids())?;
    let mut covariates = Vec::with_capacity(a.covariates.len());
    for path in &a.covariates {
        let x = Panel::load_csv(path, "NA")?;
        if x.series_ids() != outcomes.series_ids() || x.period_ids() != outcomes.period_ids() {
            return Err(Error::InvalidInput(format!("ids in {} differ from the outcomes", path.display())));
        }
        covariates.push(x.values().clone());
    }
    let tp = TreatmentPanel::new(
        outcomes.values().clone(),
        covariates,
        treated,
        a.t0,
        outcomes.series_ids().to_vec(),
        outcomes.period_ids().to_vec(),
    )?;
    let opts = AttOptions {
        rank: a.rank.choice(),
        refit: a.refit,
        level: a.ci,
        stationary: a.stationary,
        hac_lags: a.hac_lags,
        ..Default::default()
    };
    let res = att_tw(&tp, &opts)?;
    if !res.ife_converged {
        log::warn!("covariate coefficients did not converge");
    }

    let periods = &tp.period_ids[a.t0..];
    let units: Vec<&String> = res.treated_units.iter().map(|&i| &tp.unit_ids[i]).collect();

    let mut w = csv::Writer::from_writer(create(&prefixed(&a.out, "_effects.csv"))?);
    w.write_record(["t", "theta_t", "se", "ci_low", "ci_high"]).map_err(write_err)?;
    for (s, e) in res.theta_t.iter().enumerate() {
        w.write_record(estimate_record(vec![periods[s].clone()], e)).map_err(write_err)?;
    }
    w.flush().map_err(|e| Error::InvalidInput(e.to_string()))?;

    let mut w = csv::Writer::from_writer(create(&prefixed(&a.out, "_units.csv"))?);
    w.write_record(["unit_id", "theta_j", "se", "ci_low", "ci_high"]).map_err(write_err)?;
    for (j, e) in res.theta_j.iter().enumerate() {
        w.write_record(estimate_record(vec![units[j].clone()], e)).map_err(write_err)?;
    }
    w.flush().map_err(|e| Error::InvalidInput(e.to_string()))?;

    let mut w = csv::Writer::from_writer(create(&prefixed(&a.out, "_cells.csv"))?);
    w.write_record(["unit_id", "t", "theta_it", "se", "ci_low", "ci_high"]).map_err(write_err)?;
    for (j, unit) in units.iter().enumerate() {
        for (s, period) in periods.iter().enumerate() {
            w.write_record(estimate_record(vec![(*unit).clone(), period.clone()], &res.theta_it[(s, j)]))
                .map_err(write_err)?;
        }
    }
    w.flush().map_err(|e| Error::InvalidInput(e.to_string()))?;
    log::info!("{} treated and {} control units, r = {}", res.n1(), res.n0(), res.r);
    Ok(())
}

fn parse_cases(s: &str) -> Result<Vec<MissingCase>> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(MissingCase::ALL.to_vec());
    }
    match s.parse::<u8>() {
        Ok(c @ 1..=4) => Ok(vec![MissingCase::Case(c)]),
        _ => Err(Error::InvalidInput(format!("case must be 1-4 or `all`, got `{s}`"))),
    }
}

fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let started = Instant::now();
    let threads = threads_from_env();
    let table_path = prefixed(&a.out, &format!("_table{}.csv", a.table));
    let manifest = match a.table {
        1 | 2 => {
            let cases = parse_cases(&a.case)?;
            let cfg = McConfig {
                reps: a.reps.unwrap_or(500),
                seed: a.seed,
                scale_modes: a.scales.clone(),
                threads,
                ..Default::default()
            };
            if a.table == 1 {
                mc::write_table1_csv(create(&table_path)?, &mc::run_table1(&cfg, &cases)?)?;
            } else {
                mc::write_table2_csv(create(&table_path)?, &mc::run_table2(&cfg, &cases)?)?;
            }
            RunManifest::new(a.table, &serde_json::json!({ "mc": cfg, "cases": cases }), started)
        }
        _ => {
            let base = AttMcConfig { reps: a.reps.unwrap_or(1000), seed: a.seed, threads, ..Default::default() };
            let grid = match &a.grid_row {
                Some(v) => vec![(v[0], v[1], v[2])],
                None => mc::table3_grid(),
            };
            mc::write_table3_csv(create(&table_path)?, &mc::run_table3(&base, &grid)?)?;
            RunManifest::new(3, &serde_json::json!({ "att": base, "grid": grid }), started)
        }
    };
    let path = prefixed(&a.out, "_manifest.json");
    manifest.write(create(&path)?)?;
    log::info!("wrote {} in {:.1}s", table_path.display(), manifest.wall_seconds);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Impute(a) => cmd_impute(a),
        Command::Att(a) => cmd_att(a),
        Command::Simulate(a) => cmd_simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { EXIT_INPUT } else { EXIT_ESTIMATION })
        }
    }
}
