//! Command-line front end: config ingestion, subcommand dispatch and CSV
//! output.
//!
//! Exit codes: 0 success, 1 numerical failure, 2 invalid input, 3 rank
//! condition violated, 4 horizon below threshold.

pub mod config;
pub mod output;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;

use crate::canon::{canonical_form, reversed_for_q1};
use crate::model::Interval;
use crate::obsv::{detect_threshold, necessity_sweep, sigma_min_sweep};
use crate::pde::{cfl_dt, solve_forward, ControlField, Grid, StateField};
use crate::synth::assemble_internal_control;
use crate::times::{minimal_control_time, refine_omegahat, ControlTime};
use crate::Error;

pub use config::{ConfigError, RunConfig};
use output::{fmt_float, write_matrix, write_row, write_state};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_RANK: i32 = 3;
pub const EXIT_BELOW_THRESHOLD: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "hyperctl", version, about = "Minimal control time and control synthesis for 1D hyperbolic systems")]
pub struct Cli {
    /// JSON system configuration
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum WhichCoupling {
    #[value(name = "Q0")]
    Q0,
    #[value(name = "Q1")]
    Q1,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Minimal control time and its per-component breakdown
    Mintime,
    /// Canonical form of a coupling matrix
    Canon {
        /// Inline JSON matrix, e.g. "[[1,0],[0,1]]"
        #[arg(long, conflicts_with = "which")]
        matrix: Option<String>,
        /// Coupling from the config; Q1 is factored after reversal
        #[arg(long)]
        which: Option<WhichCoupling>,
    },
    /// Refined sub-region of omega for a given slack
    Omegahat {
        #[arg(long)]
        eps: f64,
    },
    /// Forward simulation, prints the final state
    Simulate {
        #[arg(long = "T")]
        horizon: f64,
        /// zero | sin:K | bump | path to a state CSV
        #[arg(long, default_value = "zero")]
        y0: String,
        /// zero | const:K:v (component K, 1-based, set to v on omega)
        #[arg(long, default_value = "zero")]
        u: String,
        /// write the state CSV here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Builds a control supported in omega steering y0 to y1
    Synthesize {
        #[arg(long = "T")]
        horizon: f64,
        #[arg(long)]
        y0: String,
        #[arg(long)]
        y1: String,
        /// output directory for control.csv, final_state.csv, summary.json
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        margin_steps: usize,
    },
    /// Smallest Gramian eigenvalue over a range of horizons
    Gramian {
        #[arg(long)]
        tmin: f64,
        #[arg(long)]
        tmax: f64,
        /// number of horizons, endpoints included
        #[arg(long)]
        steps: usize,
    },
    /// Observability ratio of the blow-up witness for each exponent
    Necessity {
        /// comma-separated exponents, each >= 1
        #[arg(long, value_delimiter = ',', required = true)]
        nu_list: Vec<f64>,
        #[arg(long = "T")]
        horizon: f64,
    },
}

/// A failure with its exit code and message.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn invalid(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INVALID,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidSpec(_)
            | Error::Precondition(_)
            | Error::PositionOutOfRange(_)
            | Error::ComponentOutOfRange { .. } => EXIT_INVALID,
            Error::NotInvertible | Error::Singular(_) => EXIT_RANK,
            Error::BelowThreshold { .. } => EXIT_BELOW_THRESHOLD,
            _ => EXIT_FAILURE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::invalid(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        // a closed downstream pipe (`| head`) is not an error
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            return Self {
                code: EXIT_OK,
                message: String::new(),
            };
        }
        Self {
            code: EXIT_FAILURE,
            message: format!("I/O error: {e}"),
        }
    }
}

type Outcome = std::result::Result<i32, Failure>;

/// Parses `args` (program name first), runs the command and returns the exit
/// code. Errors go to `err` as `ERROR: ...` lines.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(err, "{text}");
                return EXIT_INVALID;
            }
            let _ = write!(out, "{text}");
            return EXIT_OK;
        }
    };
    match dispatch(&cli, out, err) {
        Ok(code) => code,
        Err(f) => {
            if !f.message.is_empty() {
                let _ = writeln!(err, "ERROR: {}", f.message);
            }
            f.code
        }
    }
}

/// Entry point for the binary.
pub fn main_entry() -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    let mut out = stdout.lock();
    let mut err = stderr.lock();
    let code = run(std::env::args_os(), &mut out, &mut err);
    let _ = out.flush();
    code
}

fn load(cli: &Cli) -> Result<RunConfig, Failure> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::invalid("this command needs --config <PATH>"))?;
    Ok(RunConfig::from_path(path)?)
}

fn dispatch(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Outcome {
    match &cli.command {
        Command::Canon { matrix, which } => canon(cli, matrix.as_deref(), *which, out),
        Command::Mintime => mintime(&load(cli)?, out),
        Command::Omegahat { eps } => omegahat(&load(cli)?, *eps, out),
        Command::Simulate { horizon, y0, u, out: path } => {
            simulate(&load(cli)?, *horizon, y0, u, path.as_deref(), out)
        }
        Command::Synthesize {
            horizon,
            y0,
            y1,
            out: dir,
            margin_steps,
        } => synthesize(&load(cli)?, *horizon, y0, y1, dir, *margin_steps, out),
        Command::Gramian { tmin, tmax, steps } => gramian(&load(cli)?, *tmin, *tmax, *steps, out, err),
        Command::Necessity { nu_list, horizon } => necessity(&load(cli)?, nu_list, *horizon, out),
    }
}

fn mintime(cfg: &RunConfig, out: &mut dyn Write) -> Outcome {
    let result = minimal_control_time(&cfg.spec)?;
    let t_inf = result.value.finite().unwrap_or(f64::INFINITY);
    writeln!(out, "T_inf={}", fmt_float(t_inf))?;
    writeln!(out, "lo,hi,case,value")?;
    for (iv, bc) in &result.per_component {
        let value = bc.value.finite().unwrap_or(f64::INFINITY);
        writeln!(
            out,
            "{},{},{},{}",
            fmt_float(iv.lo),
            fmt_float(iv.hi),
            bc.case.as_str(),
            fmt_float(value)
        )?;
    }
    match result.value {
        ControlTime::Finite(_) => Ok(EXIT_OK),
        ControlTime::Infinite => Err(Failure {
            code: EXIT_RANK,
            message: result
                .reason
                .unwrap_or_else(|| "rank condition violated: minimal control time is infinite".into()),
        }),
    }
}

fn canon(cli: &Cli, matrix: Option<&str>, which: Option<WhichCoupling>, out: &mut dyn Write) -> Outcome {
    let (label, q) = match (matrix, which) {
        (Some(text), _) => {
            let rows: Vec<Vec<f64>> =
                serde_json::from_str(text).map_err(|e| Failure::invalid(format!("--matrix: {e}")))?;
            ("matrix", config::matrix_any("--matrix", &rows)?)
        }
        (None, Some(which)) => {
            let cfg = load(cli)?;
            match which {
                WhichCoupling::Q0 => ("Q0", cfg.spec.couplings.q0.clone()),
                WhichCoupling::Q1 => ("Q1_reversed", reversed_for_q1(&cfg.spec.couplings.q1)),
            }
        }
        (None, None) => return Err(Failure::invalid("canon needs --matrix or --which")),
    };
    let d = canonical_form(&q);
    writeln!(out, "input,{label}")?;
    writeln!(out, "canonical")?;
    write_matrix(out, &d.canonical)?;
    writeln!(out, "pivots")?;
    for &(r, c) in &d.pivots {
        writeln!(out, "{},{}", r + 1, c + 1)?;
    }
    writeln!(out, "L")?;
    write_matrix(out, &d.l)?;
    writeln!(out, "U")?;
    write_matrix(out, &d.u)?;
    Ok(EXIT_OK)
}

fn omegahat(cfg: &RunConfig, eps: f64, out: &mut dyn Write) -> Outcome {
    let r = refine_omegahat(&cfg.spec, eps)?;
    writeln!(out, "tau_max={}", fmt_float(r.tau_max))?;
    writeln!(out, "epsilon={}", fmt_float(r.epsilon))?;
    writeln!(out, "achieved_bound={}", fmt_float(r.achieved_bound))?;
    writeln!(out, "delta={}", fmt_float(r.delta))?;
    writeln!(out, "lo,hi")?;
    for iv in r.omega_hat.intervals() {
        write_row(out, &[iv.lo, iv.hi])?;
    }
    Ok(EXIT_OK)
}

/// Parses a state description: `zero`, `sin:K` (every component
/// `sin(Kπx)`), `bump` (a smooth bump on (0.25, 0.75)) or a CSV path.
pub fn parse_state(desc: &str, n: usize, grid: Grid) -> Result<StateField, Failure> {
    if desc == "zero" {
        return Ok(StateField::zeros(n, grid));
    }
    if desc == "bump" {
        return Ok(StateField::from_fn(n, grid, |_, x| {
            if x > 0.25 && x < 0.75 {
                (2.0 * std::f64::consts::PI * (x - 0.25)).sin().powi(2)
            } else {
                0.0
            }
        }));
    }
    if let Some(k) = desc.strip_prefix("sin:") {
        let k: f64 = k
            .parse()
            .map_err(|_| Failure::invalid(format!("bad wave number in `{desc}`")))?;
        return Ok(StateField::from_fn(n, grid, |_, x| (k * std::f64::consts::PI * x).sin()));
    }
    read_state_csv(Path::new(desc), n, grid)
}

fn read_state_csv(path: &Path, n: usize, grid: Grid) -> Result<StateField, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::invalid(format!("state `{}`: not a known form and unreadable ({e})", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    lines.next();
    let mut values = DMatrix::zeros(n, grid.cells);
    let mut count = 0;
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n + 1 {
            return Err(Failure::invalid(format!(
                "{}: line {}: expected {} columns, got {}",
                path.display(),
                i + 2,
                n + 1,
                fields.len()
            )));
        }
        if i >= grid.cells {
            return Err(Failure::invalid(format!(
                "{}: more than {} rows",
                path.display(),
                grid.cells
            )));
        }
        for (k, f) in fields[1..].iter().enumerate() {
            values[(k, i)] = f.trim().parse().map_err(|_| {
                Failure::invalid(format!("{}: line {}: bad number `{f}`", path.display(), i + 2))
            })?;
        }
        count += 1;
    }
    if count != grid.cells {
        return Err(Failure::invalid(format!(
            "{}: expected {} rows, got {count}",
            path.display(),
            grid.cells
        )));
    }
    Ok(StateField { values, grid, t: 0.0 })
}

fn parse_control(desc: &str, cfg: &RunConfig, steps: usize) -> Result<ControlField, Failure> {
    let n = cfg.spec.n();
    let mask = cfg.grid.mask(&cfg.spec.omega);
    if desc == "zero" {
        return Ok(ControlField::zeros(n, cfg.grid.cells, steps, mask));
    }
    let bad = || Failure::invalid(format!("control `{desc}`: expected zero or const:K:v"));
    let rest = desc.strip_prefix("const:").ok_or_else(bad)?;
    let (k, v) = rest.split_once(':').ok_or_else(bad)?;
    let k: usize = k.parse().map_err(|_| bad())?;
    let v: f64 = v.parse().map_err(|_| bad())?;
    if k == 0 || k > n {
        return Err(Failure::invalid(format!("control component {k} outside 1..={n}")));
    }
    let slice = DMatrix::from_fn(n, cfg.grid.cells, |r, i| if r == k - 1 && mask[i] { v } else { 0.0 });
    Ok(ControlField::new(vec![slice; steps], mask)?)
}

fn simulate(
    cfg: &RunConfig,
    horizon: f64,
    y0: &str,
    u: &str,
    path: Option<&Path>,
    out: &mut dyn Write,
) -> Outcome {
    let time = cfl_dt(&cfg.spec, &cfg.grid, cfg.cfl, horizon)?;
    let y0 = parse_state(y0, cfg.spec.n(), cfg.grid)?;
    let control = parse_control(u, cfg, time.steps)?;
    let solution = solve_forward(&cfg.spec, &y0, Some(&control), time)?;
    match path {
        Some(p) => {
            let mut file = std::io::BufWriter::new(fs::File::create(p)?);
            write_state(&mut file, &solution.final_state)?;
            file.flush()?;
        }
        None => write_state(out, &solution.final_state)?,
    }
    Ok(EXIT_OK)
}

#[derive(serde::Serialize)]
struct Summary {
    horizon: f64,
    dt: f64,
    steps: usize,
    cells: usize,
    achieved_error: f64,
    omega_hat: Vec<[f64; 2]>,
    omega_one: Vec<[f64; 2]>,
    residuals: Vec<ResidualEntry>,
}

#[derive(serde::Serialize)]
struct ResidualEntry {
    lo: f64,
    hi: f64,
    residual: f64,
}

fn pairs(ivs: &[Interval]) -> Vec<[f64; 2]> {
    ivs.iter().map(|iv| [iv.lo, iv.hi]).collect()
}

fn synthesize(
    cfg: &RunConfig,
    horizon: f64,
    y0: &str,
    y1: &str,
    dir: &Path,
    margin_steps: usize,
    out: &mut dyn Write,
) -> Outcome {
    let n = cfg.spec.n();
    let y0 = parse_state(y0, n, cfg.grid)?;
    let y1 = parse_state(y1, n, cfg.grid)?;
    let report = assemble_internal_control(&cfg.spec, &y0, &y1, horizon, cfg.cfl, margin_steps)?;

    fs::create_dir_all(dir)?;
    let mut file = std::io::BufWriter::new(fs::File::create(dir.join("control.csv"))?);
    let header: Vec<String> = (1..=n).map(|k| format!("u{k}")).collect();
    writeln!(file, "t,x,{}", header.join(","))?;
    let centers = cfg.grid.centers();
    for (k, slice) in report.control.slices.iter().enumerate() {
        let t = report.time.time(k);
        for (i, &x) in centers.iter().enumerate() {
            let mut row = vec![t, x];
            row.extend(slice.column(i).iter());
            write_row(&mut file, &row)?;
        }
    }
    file.flush()?;

    let mut file = std::io::BufWriter::new(fs::File::create(dir.join("final_state.csv"))?);
    write_state(&mut file, &report.final_state)?;
    file.flush()?;

    let summary = Summary {
        horizon: report.time.horizon(),
        dt: report.time.dt,
        steps: report.time.steps,
        cells: cfg.grid.cells,
        achieved_error: report.achieved_error,
        omega_hat: pairs(&report.omega_hat),
        omega_one: pairs(&report.omega_one),
        residuals: report
            .residuals
            .iter()
            .map(|(iv, r)| ResidualEntry {
                lo: iv.lo,
                hi: iv.hi,
                residual: *r,
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Failure {
        code: EXIT_FAILURE,
        message: e.to_string(),
    })?;
    fs::write(dir.join("summary.json"), json + "\n")?;

    writeln!(out, "achieved_error={}", fmt_float(report.achieved_error))?;
    writeln!(out, "steps={}", report.time.steps)?;
    writeln!(out, "dt={}", fmt_float(report.time.dt))?;
    writeln!(out, "lo,hi,residual")?;
    for (iv, r) in &report.residuals {
        write_row(out, &[iv.lo, iv.hi, *r])?;
    }
    Ok(EXIT_OK)
}

fn gramian(cfg: &RunConfig, tmin: f64, tmax: f64, steps: usize, out: &mut dyn Write, err: &mut dyn Write) -> Outcome {
    if steps == 0 {
        return Err(Failure::invalid("--steps must be at least 1"));
    }
    if !(tmin > 0.0 && tmin <= tmax) {
        return Err(Failure::invalid(format!("need 0 < tmin <= tmax, got {tmin}, {tmax}")));
    }
    let horizons: Vec<f64> = if steps == 1 {
        vec![tmin]
    } else {
        (0..steps)
            .map(|i| tmin + (tmax - tmin) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    let sweep = sigma_min_sweep(&cfg.spec, cfg.grid, cfg.cfl, &horizons, &cfg.spec.omega)?;
    writeln!(out, "T,sigma_min")?;
    for &(t, s) in &sweep.points {
        write_row(out, &[t, s])?;
    }
    match detect_threshold(&sweep) {
        Some(t) => writeln!(err, "threshold={}", fmt_float(t))?,
        None => writeln!(err, "threshold=none")?,
    }
    Ok(EXIT_OK)
}

fn necessity(cfg: &RunConfig, nus: &[f64], horizon: f64, out: &mut dyn Write) -> Outcome {
    let rows = necessity_sweep(&cfg.spec, cfg.grid, cfg.cfl, nus, horizon)?;
    writeln!(out, "nu,ratio")?;
    for (nu, ratio) in rows {
        write_row(out, &[nu, ratio])?;
    }
    Ok(EXIT_OK)
}
