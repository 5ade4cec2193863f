//! Command-line front end.
//!
//! Exit codes: 0 all verdicts pass, 1 a bound was violated, 2 configuration
//! or usage error, 3 I/O error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::bounds::{
    bound_optimized_floor, bound_general_margin_exp, bound_general_margin_expectation, bound_master_power, bound_mle,
    bound_quadratic_exp, bound_quadratic_power, bound_small_p_ls, BoundReport, TailSpec,
};
use crate::concentration::{BoundMode, Complexity};
use crate::error::{Error, Result};
use crate::experiments::{estimate, verify, ExperimentConfig};
use crate::margins::MarginSpec;

pub const EXIT_PASS: i32 = 0;
pub const EXIT_VIOLATION: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "erm-oracle", version, about = "Oracle bounds for ERM model selection and their Monte Carlo verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Evaluate one bound and print its report as JSON.
    Bounds(BoundsArgs),
    /// Run replications and write per-trial CSV plus a summary.
    Simulate(RunArgs),
    /// Run replications and check every configured bound.
    Verify(RunArgs),
}

/// Bound families, named on the command line by their lemma numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BoundKind {
    #[value(name = "4.1")]
    QuadraticExp,
    #[value(name = "4.2")]
    Likelihood,
    #[value(name = "5.1")]
    QuadraticPower,
    #[value(name = "5.3")]
    SmallP,
    #[value(name = "6.1")]
    MarginExpectation,
    #[value(name = "6.2")]
    MarginExp,
    #[value(name = "7.1i")]
    MasterPower,
    #[value(name = "7.1ii")]
    MasterExp,
    #[value(name = "7.1c")]
    OptimizedFloor,
}

#[allow(non_snake_case)]
#[derive(Debug, Args)]
struct BoundsArgs {
    #[arg(long, value_enum)]
    lemma: BoundKind,
    #[arg(long)]
    n: f64,
    #[arg(long)]
    p: usize,
    #[arg(long)]
    estar: f64,
    #[arg(long)]
    m: Option<f64>,
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long = "C")]
    C: Option<f64>,
    #[arg(long = "K")]
    K: Option<f64>,
    #[arg(long)]
    s: Option<f64>,
    #[arg(long = "M")]
    M: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Confidence split for the expectation bound, in (0, 1).
    #[arg(long)]
    delta: Option<f64>,
    /// Floor added to the excess risk in the expectation bound.
    #[arg(long)]
    eps: Option<f64>,
    /// Concavity order for the expectation bound.
    #[arg(long)]
    r: Option<f64>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "erm-oracle-out")]
    out: PathBuf,
}

/// A fully resolved run: the experiment after flag overrides, where its
/// outputs go, and how many workers it used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub out: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

impl RunConfig {
    fn from_args(args: &RunArgs) -> Result<Self> {
        let text = fs::read_to_string(&args.config)?;
        let mut experiment: ExperimentConfig = serde_json::from_str(&text).map_err(parse_error)?;
        if let Some(seed) = args.seed {
            experiment.seed = seed;
        }
        if let Some(reps) = args.reps {
            experiment.reps = reps;
        }
        experiment.validate()?;
        Ok(Self {
            experiment,
            out: args.out.clone(),
            workers: args.workers,
        })
    }
}

/// JSON syntax and schema problems are configuration errors; only failures
/// to read count as I/O.
fn parse_error(e: serde_json::Error) -> Error {
    if e.is_io() {
        Error::Json(e)
    } else {
        Error::Usage(format!("config: {e}"))
    }
}

fn need(v: Option<f64>, flag: &str, kind: BoundKind) -> Result<f64> {
    v.ok_or_else(|| {
        let name = kind.to_possible_value().map(|p| p.get_name().to_string()).unwrap_or_default();
        Error::Usage(format!("--{flag} is required for --lemma {name}"))
    })
}

fn tail_from(a: &BoundsArgs, kind: BoundKind) -> Result<TailSpec> {
    match (a.K, a.s, a.M) {
        (Some(k), None, None) => Ok(TailSpec::ExpMoment { k }),
        (None, Some(s), Some(m)) => Ok(TailSpec::PowerTail { s, m }),
        _ => {
            let name = kind.to_possible_value().map(|p| p.get_name().to_string()).unwrap_or_default();
            Err(Error::Usage(format!("--lemma {name}: give either --K or both --s and --M")))
        }
    }
}

fn bound_from_args(a: &BoundsArgs) -> Result<BoundReport> {
    use BoundKind::*;
    let kind = a.lemma;
    let cx = Complexity::new(a.n, a.p)?;
    let mode = || BoundMode::from_flags(a.t, a.m);
    match kind {
        QuadraticExp => bound_quadratic_exp(&cx, need(a.C, "C", kind)?, need(a.K, "K", kind)?, a.estar, mode()?),
        Likelihood => bound_mle(&cx, need(a.C, "C", kind)?, a.estar, mode()?),
        QuadraticPower => bound_quadratic_power(
            &cx,
            need(a.C, "C", kind)?,
            need(a.s, "s", kind)?,
            need(a.M, "M", kind)?,
            a.estar,
            need(a.m, "m", kind)?,
        ),
        SmallP => bound_small_p_ls(&cx, need(a.C, "C", kind)?, need(a.s, "s", kind)?, need(a.M, "M", kind)?, a.estar),
        MarginExpectation => {
            let spec = MarginSpec::power(a.kappa.unwrap_or(1.0), need(a.C, "C", kind)?)?;
            bound_general_margin_expectation(
                &spec,
                &cx,
                need(a.K, "K", kind)?,
                a.estar,
                need(a.delta, "delta", kind)?,
                need(a.eps, "eps", kind)?,
                need(a.r, "r", kind)?,
            )
        }
        MarginExp | MasterExp => bound_general_margin_exp(
            &cx,
            need(a.kappa, "kappa", kind)?,
            need(a.C, "C", kind)?,
            need(a.K, "K", kind)?,
            a.estar,
            mode()?,
            a.tau,
        ),
        MasterPower => {
            let tau = match a.tau {
                Some(t) => t,
                None if a.estar > 0.0 => a.estar,
                None => return Err(Error::Usage("--tau is required when --estar is 0".into())),
            };
            bound_master_power(
                &cx,
                need(a.kappa, "kappa", kind)?,
                need(a.C, "C", kind)?,
                need(a.s, "s", kind)?,
                need(a.M, "M", kind)?,
                a.estar,
                need(a.m, "m", kind)?,
                tau,
            )
        }
        OptimizedFloor => bound_optimized_floor(
            &cx,
            need(a.kappa, "kappa", kind)?,
            need(a.C, "C", kind)?,
            tail_from(a, kind)?,
            a.estar,
            need(a.m, "m", kind)?,
        ),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn prepare(run: &RunConfig) -> Result<()> {
    fs::create_dir_all(&run.out)?;
    write_json(&run.out.join("run.json"), run)
}

fn cmd_simulate(args: &RunArgs, stdout: &mut dyn Write) -> Result<i32> {
    let run = RunConfig::from_args(args)?;
    run.experiment.problem.build()?;
    prepare(&run)?;
    let (trials, summary) = estimate(&run.experiment, run.workers)?;
    trials.write_csv(fs::File::create(run.out.join("trials.csv"))?)?;
    write_json(&run.out.join("summary.json"), &summary)?;
    writeln!(stdout, "{}", serde_json::to_string_pretty(&summary)?)?;
    Ok(EXIT_PASS)
}

fn cmd_verify(args: &RunArgs, stdout: &mut dyn Write) -> Result<i32> {
    let run = RunConfig::from_args(args)?;
    if run.experiment.bounds.is_empty() {
        return Err(Error::Usage("config names no bounds to verify".into()));
    }
    run.experiment.problem.build()?;
    prepare(&run)?;
    let (trials, verdicts) = verify(&run.experiment, run.workers)?;
    trials.write_csv(fs::File::create(run.out.join("trials.csv"))?)?;
    write_json(&run.out.join("verdicts.json"), &verdicts)?;
    writeln!(stdout, "{}", serde_json::to_string_pretty(&verdicts)?)?;
    Ok(if verdicts.iter().all(|v| v.pass) { EXIT_PASS } else { EXIT_VIOLATION })
}

fn dispatch(cli: Cli, stdout: &mut dyn Write) -> Result<i32> {
    match cli.command {
        Command::Bounds(a) => {
            let report = bound_from_args(&a)?;
            writeln!(stdout, "{}", serde_json::to_string_pretty(&report.to_flat_json())?)?;
            Ok(EXIT_PASS)
        }
        Command::Simulate(a) => cmd_simulate(&a, stdout),
        Command::Verify(a) => cmd_verify(&a, stdout),
    }
}

/// Runs the CLI on `args` (including the program name) and returns the
/// exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 { write!(stdout, "{text}") } else { write!(stderr, "{text}") };
            return if code == 0 { EXIT_PASS } else { EXIT_CONFIG };
        }
    };
    match dispatch(cli, stdout) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            if e.is_io() { EXIT_IO } else { EXIT_CONFIG }
        }
    }
}
