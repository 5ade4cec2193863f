//! Monte Carlo harness: replicated ERM trials on a problem instance, moment
//! and tail estimates, and verdicts against bound evaluations.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{
    asymptotic_diagnostic, bound_optimized_floor, bound_general_margin_exp, bound_general_margin_expectation,
    bound_master_power, bound_mle, bound_quadratic_exp, bound_quadratic_power, bound_small_p_ls, BoundReport,
    Scale, Statement, TailSpec,
};
use crate::concentration::{BoundMode, Complexity};
use crate::erm::{moment_norm, select_erm, tail_frequency, MomentEstimate, SeedRecord, TailEstimate, TrialResult};
use crate::error::{ensure, Error, Result};
use crate::margins::{verify_exp_moments, verify_margin, EXACT_TOL};
use crate::problems::{ProblemConfig, ProblemInstance};
use crate::rng::derive;

/// Which bound a verdict is issued against. Margin and tail parameters come
/// from the problem's claims unless overridden.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "bound", rename_all = "snake_case", deny_unknown_fields)]
pub enum BoundSelector {
    QuadraticExp {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        m: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        t: Option<f64>,
    },
    Mle {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        m: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        t: Option<f64>,
    },
    QuadraticPower {
        m: f64,
    },
    SmallP,
    GeneralMarginExpectation {
        delta: f64,
        eps: f64,
        r: f64,
    },
    GeneralMarginExp {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        m: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        t: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tau: Option<f64>,
    },
    MasterPower {
        m: f64,
        tau: f64,
    },
    OptimizedFloor {
        m: f64,
    },
    /// Lower bound `P(Ê >= n^{-(s-1)/s}) >= 1 - exp(-2^{-s})`.
    LowerBound,
}

/// Explicit parameter values replacing the problem's claims.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    /// Multiplies `C` after any override; `0.5` falsifies a tight bound.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_m: Option<f64>,
    /// Multiplies the evaluated bound value; used to check that a too-small
    /// bound is detected.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_factor: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentRequest {
    pub m: f64,
    #[serde(default = "one")]
    pub kappa: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub reps: usize,
    #[serde(default)]
    pub seed: u64,
    /// `(E Ê^{m/2κ})^{1/m}` estimates to report.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub moments: Vec<MomentRequest>,
    /// Thresholds `x` for `P(Ê >= x)`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub thresholds: Vec<f64>,
    /// Mixing weight for likelihood problems.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bounds: Vec<BoundSelector>,
    #[serde(default, skip_serializing_if = "is_default")]
    pub overrides: Overrides,
    /// Also verify the claimed margin and moment conditions exactly.
    #[serde(default)]
    pub exact_checks: bool,
    /// Compare `Ê^{1/2κ}`-scale moment bounds after dividing by `E_*^{1/2κ}`.
    #[serde(default)]
    pub normalized: bool,
}

fn is_default(o: &Overrides) -> bool {
    *o == Overrides::default()
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.reps >= 1, "reps", "must be >= 1")?;
        if let Some(a) = self.alpha {
            ensure((0.0..=1.0).contains(&a), "alpha", "must lie in [0, 1]")?;
        }
        for r in &self.moments {
            ensure(r.m >= 1.0, "m", "moment order must be >= 1")?;
            ensure(r.kappa >= 1.0, "kappa", "must be >= 1")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub quantity: String,
    pub empirical: f64,
    pub stderr: f64,
    pub bound: f64,
    /// `bound - empirical` for upper bounds, `empirical - bound` for lower.
    pub slack: f64,
    pub pass: bool,
    pub branch: String,
}

impl Verdict {
    fn upper(quantity: String, empirical: f64, stderr: f64, bound: f64, branch: String) -> Self {
        let slack = bound - empirical;
        Self {
            quantity,
            empirical,
            stderr,
            bound,
            slack,
            pass: slack >= -3.0 * stderr,
            branch,
        }
    }

    fn lower(quantity: String, empirical: f64, stderr: f64, bound: f64, branch: String) -> Self {
        let slack = empirical - bound;
        Self {
            quantity,
            empirical,
            stderr,
            bound,
            slack,
            pass: slack >= -3.0 * stderr,
            branch,
        }
    }
}

/// A finished batch of replications.
#[derive(Debug, Clone)]
pub struct Run {
    pub trials: Vec<TrialResult>,
    /// Per-trial outcome of `P_n γ_mix <= P_n γ_*`, when a mixture was run.
    pub mixture_holds: Vec<bool>,
    pub estar: f64,
}

fn pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        ensure(w >= 1, "workers", "must be >= 1")?;
        b = b.num_threads(w);
    }
    b.build().map_err(|e| Error::invalid("workers", e.to_string()))
}

fn trial(problem: &ProblemInstance, seed: u64, rep: u64, alpha: Option<f64>) -> Result<(TrialResult, Option<bool>)> {
    let mut rng = derive(seed, rep);
    let draw = problem.sample(&mut rng)?;
    let selected = select_erm(&draw.table);
    let mix = match alpha {
        Some(a) => problem.mixture(a, selected, &draw).transpose()?,
        None => None,
    };
    Ok((
        TrialResult {
            selected,
            hat_e: problem.risk().get(selected),
            hat_e_alpha: mix.map(|m| m.hat_e_alpha),
            seed: SeedRecord { seed, stream: rep },
        },
        mix.map(|m| m.holds()),
    ))
}

/// One replication on stream `rep` of `seed`.
pub fn run_trial(problem: &ProblemInstance, seed: u64, rep: u64, alpha: Option<f64>) -> Result<TrialResult> {
    trial(problem, seed, rep, alpha).map(|(t, _)| t)
}

/// `reps` replications; the result does not depend on `workers`.
pub fn run(problem: &ProblemInstance, seed: u64, reps: usize, alpha: Option<f64>, workers: Option<usize>) -> Result<Run> {
    ensure(reps >= 1, "reps", "must be >= 1")?;
    let outcomes: Vec<(TrialResult, Option<bool>)> = pool(workers)?.install(|| {
        (0..reps as u64)
            .into_par_iter()
            .map(|rep| trial(problem, seed, rep, alpha))
            .collect::<Result<_>>()
    })?;
    let mixture_holds = outcomes.iter().filter_map(|(_, h)| *h).collect();
    Ok(Run {
        trials: outcomes.into_iter().map(|(t, _)| t).collect(),
        mixture_holds,
        estar: problem.risk().estar(),
    })
}

impl Run {
    pub fn hat_e(&self) -> Vec<f64> {
        self.trials.iter().map(|t| t.hat_e).collect()
    }

    pub fn moment(&self, m: f64, kappa: f64) -> Result<MomentEstimate> {
        let xs: Vec<f64> = self.trials.iter().map(|t| t.hat_e.powf(1.0 / (2.0 * kappa))).collect();
        let mut est = moment_norm(&xs, m)?;
        est.kappa = kappa;
        Ok(est)
    }

    pub fn tail(&self, threshold: f64) -> Result<TailEstimate> {
        tail_frequency(&self.hat_e(), threshold)
    }

    /// Per-trial CSV: `rep, selected, hat_e, hat_e_alpha, estar, ratio`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            rep: u64,
            selected: usize,
            hat_e: f64,
            hat_e_alpha: Option<f64>,
            estar: f64,
            ratio: Option<f64>,
        }
        let mut w = csv::Writer::from_writer(out);
        for t in &self.trials {
            w.serialize(Row {
                rep: t.seed.stream,
                selected: t.selected,
                hat_e: t.hat_e,
                hat_e_alpha: t.hat_e_alpha,
                estar: self.estar,
                ratio: (self.estar > 0.0).then(|| t.hat_e / self.estar),
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub reps: usize,
    pub seed: u64,
    pub estar: f64,
    pub moments: Vec<MomentEstimate>,
    pub tails: Vec<TailEstimate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mixture_violations: Option<usize>,
}

/// Moment and tail estimates requested by `config`.
pub fn estimate(config: &ExperimentConfig, workers: Option<usize>) -> Result<(Run, Summary)> {
    config.validate()?;
    let problem = config.problem.build()?;
    let run = run(&problem, config.seed, config.reps, config.alpha, workers)?;
    let summary = summarize(config, &run)?;
    Ok((run, summary))
}

fn summarize(config: &ExperimentConfig, run: &Run) -> Result<Summary> {
    Ok(Summary {
        reps: config.reps,
        seed: config.seed,
        estar: run.estar,
        moments: config
            .moments
            .iter()
            .map(|r| run.moment(r.m, r.kappa))
            .collect::<Result<_>>()?,
        tails: config.thresholds.iter().map(|x| run.tail(*x)).collect::<Result<_>>()?,
        mixture_violations: config
            .alpha
            .map(|_| run.mixture_holds.iter().filter(|h| !**h).count()),
    })
}

struct Params {
    kappa: f64,
    c: f64,
    tail: TailSpec,
}

fn incompatible(bound: &str, precondition: impl Into<String>) -> Error {
    Error::Incompatible {
        bound: bound.to_string(),
        precondition: precondition.into(),
    }
}

fn params(problem: &ProblemInstance, o: &Overrides, bound: &str) -> Result<Params> {
    let (kappa, c) = match (o.kappa, o.c) {
        (Some(k), Some(c)) => (k, c),
        _ => {
            let (k0, c0) = problem
                .margin_meta()
                .value
                .power_params()
                .ok_or_else(|| incompatible(bound, "needs a power-form margin or explicit kappa and C"))?;
            (o.kappa.unwrap_or(k0), o.c.unwrap_or(c0))
        }
    };
    let c = c * o.c_factor.unwrap_or(1.0);
    let tail = match problem.tail_meta().value {
        TailSpec::ExpMoment { k } => TailSpec::ExpMoment { k: o.k.unwrap_or(k) },
        TailSpec::PowerTail { s, m } => TailSpec::PowerTail {
            s: o.s.unwrap_or(s),
            m: o.scale_m.unwrap_or(m),
        },
    };
    Ok(Params { kappa, c, tail })
}

fn need_exp(tail: TailSpec, bound: &str) -> Result<f64> {
    match tail {
        TailSpec::ExpMoment { k } => Ok(k),
        TailSpec::PowerTail { .. } => Err(incompatible(bound, "needs the exponential moment condition")),
    }
}

fn need_power(tail: TailSpec, bound: &str) -> Result<(f64, f64)> {
    match tail {
        TailSpec::PowerTail { s, m } => Ok((s, m)),
        TailSpec::ExpMoment { .. } => Err(incompatible(bound, "needs a power-tail envelope")),
    }
}

fn need_kappa_one(kappa: f64, bound: &str) -> Result<()> {
    if kappa == 1.0 {
        Ok(())
    } else {
        Err(incompatible(bound, "needs a quadratic margin (kappa = 1)"))
    }
}

/// Evaluates the selected bound for `problem`.
pub fn bound_report(
    selector: &BoundSelector,
    problem: &ProblemInstance,
    overrides: &Overrides,
) -> Result<BoundReport> {
    let mut report = evaluate(selector, problem, overrides)?;
    if let Some(f) = overrides.value_factor {
        ensure(f > 0.0 && f.is_finite(), "value_factor", "must be positive")?;
        report.value *= f;
        report.notes.push(format!("value scaled by {f}"));
    }
    Ok(report)
}

fn evaluate(selector: &BoundSelector, problem: &ProblemInstance, overrides: &Overrides) -> Result<BoundReport> {
    let cx = Complexity::new(problem.n() as f64, problem.p())?;
    let estar = problem.risk().estar();
    match selector {
        BoundSelector::QuadraticExp { m, t } => {
            let p = params(problem, overrides, "quadratic_exp")?;
            need_kappa_one(p.kappa, "quadratic_exp")?;
            bound_quadratic_exp(&cx, p.c, need_exp(p.tail, "quadratic_exp")?, estar, BoundMode::from_flags(*t, *m)?)
        }
        BoundSelector::Mle { m, t } => {
            if !matches!(problem.population(), crate::problems::Population::Density(..)) {
                return Err(incompatible("mle", "needs a likelihood (density) problem"));
            }
            let p = params(problem, overrides, "mle")?;
            bound_mle(&cx, p.c, estar, BoundMode::from_flags(*t, *m)?)
        }
        BoundSelector::QuadraticPower { m } => {
            let p = params(problem, overrides, "quadratic_power")?;
            need_kappa_one(p.kappa, "quadratic_power")?;
            let (s, sm) = need_power(p.tail, "quadratic_power")?;
            bound_quadratic_power(&cx, p.c, s, sm, estar, *m)
        }
        BoundSelector::SmallP => {
            let p = params(problem, overrides, "small_p_least_squares")?;
            need_kappa_one(p.kappa, "small_p_least_squares")?;
            let (s, sm) = need_power(p.tail, "small_p_least_squares")?;
            bound_small_p_ls(&cx, p.c, s, sm, estar)
        }
        BoundSelector::GeneralMarginExpectation { delta, eps, r } => {
            let mut spec = problem.margin_meta().value.clone();
            if overrides.c.is_some() || overrides.kappa.is_some() || overrides.c_factor.is_some() {
                let p = params(problem, overrides, "general_margin_expectation")?;
                spec = crate::margins::MarginSpec::power(p.kappa, p.c)?.with_anchor(spec.anchor);
            }
            let k = need_exp(params(problem, overrides, "general_margin_expectation")?.tail, "general_margin_expectation")?;
            bound_general_margin_expectation(&spec, &cx, k, estar, *delta, *eps, *r)
        }
        BoundSelector::GeneralMarginExp { m, t, tau } => {
            let p = params(problem, overrides, "general_margin_exp")?;
            let k = need_exp(p.tail, "general_margin_exp")?;
            bound_general_margin_exp(&cx, p.kappa, p.c, k, estar, BoundMode::from_flags(*t, *m)?, *tau)
        }
        BoundSelector::MasterPower { m, tau } => {
            let p = params(problem, overrides, "master_power")?;
            let (s, sm) = need_power(p.tail, "master_power")?;
            bound_master_power(&cx, p.kappa, p.c, s, sm, estar, *m, *tau)
        }
        BoundSelector::OptimizedFloor { m } => {
            let p = params(problem, overrides, "optimized_floor")?;
            bound_optimized_floor(&cx, p.kappa, p.c, p.tail, estar, *m)
        }
        BoundSelector::LowerBound => Err(incompatible("lower_bound", "has no upper-bound report")),
    }
}

fn lower_bound_verdict(problem: &ProblemInstance, run: &Run) -> Result<Verdict> {
    let (s, _) = need_power(problem.tail_meta().value, "lower_bound")?;
    if problem.risk().estar() != 0.0 {
        return Err(incompatible("lower_bound", "needs the target among the candidates (E_* = 0)"));
    }
    let threshold = (problem.n() as f64).powf(-(s - 1.0) / s);
    // Excess risks are computed, so allow rounding at the threshold.
    let est = tail_frequency(&run.hat_e(), threshold * (1.0 - 1e-12))?;
    Ok(Verdict::lower(
        format!("P(hat_e >= {threshold})"),
        est.frequency,
        est.stderr,
        1.0 - (-(2f64.powf(-s))).exp(),
        "lower".into(),
    ))
}

fn report_verdict(report: &BoundReport, run: &Run, mle: bool, normalized: bool) -> Result<Verdict> {
    let estar = run.estar;
    let raw: Vec<f64> = if mle {
        run.trials
            .iter()
            .map(|t| t.hat_e_alpha.ok_or_else(|| incompatible("mle", "needs a mixing weight alpha")))
            .collect::<Result<_>>()?
    } else {
        run.hat_e()
    };
    if report.scale == Scale::SqrtRatio && estar <= 0.0 {
        return Err(incompatible(&report.bound, "ratio scale needs E_* > 0"));
    }
    let (norm, label) = match report.scale {
        Scale::Root { kappa } if normalized && estar > 0.0 => (estar.powf(1.0 / (2.0 * kappa)), format!("{}/norm", report.scale.label())),
        _ => (1.0, report.scale.label()),
    };
    let xs: Vec<f64> = raw.iter().map(|h| report.scale.apply(*h, estar) / norm).collect();
    let branch = format!("{}:{}", report.bound, report.branch);
    match report.statement {
        Statement::Moment { m } => {
            let est = moment_norm(&xs, m)?;
            Ok(Verdict::upper(
                format!("L{m} norm of {label}"),
                est.value,
                est.stderr,
                report.value / norm,
                branch,
            ))
        }
        Statement::Tail { t } => {
            let est = tail_frequency(&xs, report.value / norm)?;
            Ok(Verdict::upper(
                format!("P({label} >= {})", report.value / norm),
                est.frequency,
                est.stderr,
                (-t).exp(),
                branch,
            ))
        }
    }
}

/// Verdicts for every configured bound, plus exact checks if requested.
pub fn verify(config: &ExperimentConfig, workers: Option<usize>) -> Result<(Run, Vec<Verdict>)> {
    config.validate()?;
    ensure(config.reps >= 2, "reps", "verdicts need at least 2 replications")?;
    let problem = config.problem.build()?;
    let mle_requested = config.bounds.iter().any(|b| matches!(b, BoundSelector::Mle { .. }));
    if mle_requested && config.alpha.is_none() {
        return Err(incompatible("mle", "needs a mixing weight alpha"));
    }
    // Evaluate every report before simulating so configuration errors surface early.
    let reports: Vec<Option<BoundReport>> = config
        .bounds
        .iter()
        .map(|b| match b {
            BoundSelector::LowerBound => {
                need_power(problem.tail_meta().value, "lower_bound")?;
                Ok(None)
            }
            _ => bound_report(b, &problem, &config.overrides).map(Some),
        })
        .collect::<Result<_>>()?;
    let run = run(&problem, config.seed, config.reps, config.alpha, workers)?;
    let mut verdicts = Vec::new();
    for (sel, rep) in config.bounds.iter().zip(&reports) {
        verdicts.push(match rep {
            Some(r) => report_verdict(r, &run, matches!(sel, BoundSelector::Mle { .. }), config.normalized)?,
            None => lower_bound_verdict(&problem, &run)?,
        });
    }
    if config.alpha.is_some() && !run.mixture_holds.is_empty() {
        let bad = run.mixture_holds.iter().filter(|h| !**h).count();
        verdicts.push(Verdict::upper(
            "mixture inequality violations".into(),
            bad as f64,
            0.0,
            0.0,
            "per_trial".into(),
        ));
    }
    if config.exact_checks {
        let margin = &problem.margin_meta().value;
        let slack = verify_margin(&problem, margin)?;
        verdicts.push(Verdict::lower("margin condition slack".into(), slack, 0.0, 0.0, "exact".into()));
        if let TailSpec::ExpMoment { k } = problem.tail_meta().value {
            let ratio = verify_exp_moments(&problem, k, None, 12)?;
            verdicts.push(Verdict::upper(
                "moment condition ratio".into(),
                ratio,
                0.0,
                1.0 + EXACT_TOL,
                "exact".into(),
            ));
        }
    }
    Ok((run, verdicts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub multiplier: f64,
    pub estar: f64,
    pub diagnostic: f64,
    /// Estimated `E(Ê/E_*)^{m/2κ}`.
    pub ratio: f64,
    pub stderr: f64,
}

/// Diagnostic ratio of a built problem, from its own claims.
pub fn problem_diagnostic(problem: &ProblemInstance) -> Result<f64> {
    let (kappa, c) = problem
        .margin_meta()
        .value
        .power_params()
        .ok_or_else(|| incompatible("asymptotic", "needs a power-form margin"))?;
    let cx = Complexity::new(problem.n() as f64, problem.p())?;
    asymptotic_diagnostic(&cx, kappa, c, problem.tail_meta().value, problem.risk().estar())
}

/// Rescales the excess risks of a regression family by each multiplier and
/// estimates `E(Ê/E_*)^{m/2κ}` (`m = 2κ` gives the mean ratio).
pub fn asymptotic_sweep(
    base: &ExperimentConfig,
    multipliers: &[f64],
    m: f64,
    workers: Option<usize>,
) -> Result<Vec<SweepRow>> {
    base.validate()?;
    let ProblemConfig::RegressionFamily {
        n,
        excess,
        noise,
        tail_order,
    } = &base.problem
    else {
        return Err(incompatible("asymptotic", "sweeps rescale a regression family"));
    };
    multipliers
        .iter()
        .map(|&mult| {
            let scaled: Vec<f64> = excess.iter().map(|e| e * mult).collect();
            let problem = crate::problems::regression_family(*n, &scaled, *noise, *tail_order)?;
            let estar = problem.risk().estar();
            if estar <= 0.0 {
                return Err(Error::invalid("estar", "every sweep row needs E_* > 0"));
            }
            let diagnostic = problem_diagnostic(&problem)?;
            let (kappa, _) = problem.margin_meta().value.power_params().unwrap_or((1.0, 1.0));
            let r = run(&problem, base.seed, base.reps, None, workers)?;
            let xs: Vec<f64> = r.hat_e().iter().map(|h| (h / estar).powf(1.0 / (2.0 * kappa))).collect();
            let est = moment_norm(&xs, m)?;
            // Report E X^m itself rather than the norm.
            let ratio = est.value.powf(m);
            let stderr = est.stderr * m * est.value.powf(m - 1.0);
            Ok(SweepRow {
                multiplier: mult,
                estar,
                diagnostic,
                ratio,
                stderr,
            })
        })
        .collect()
}
