//! Closed-form risk bounds for the ERM-selected candidate, their constants,
//! and branch selection.
//!
//! Every evaluator returns a [`BoundReport`] whose `scale` names the
//! transform of `Ê` the value bounds (`L_m` norm in moment mode, exceedance
//! threshold at level `e^{-t}` in tail mode).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::concentration::{check_moment_order, ctilde, min_power_sum, BoundMode, Complexity};
use crate::error::{ensure, Error, Result};
use crate::margins::{conjugate_H, margin_inverse, MarginSpec};
use crate::numeric::{gamma, logspace};

/// Tail behaviour of the excess losses or of their envelope `Γ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum TailSpec {
    /// Bernstein moment condition with scale `K`.
    ExpMoment { k: f64 },
    /// `P(Γ > x) <= (M/x)^s`.
    PowerTail { s: f64, m: f64 },
}

impl TailSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TailSpec::ExpMoment { k } => ensure(k > 0.0 && k.is_finite(), "K", "must be positive"),
            TailSpec::PowerTail { s, m } => {
                ensure(s > 1.0 && s.is_finite(), "s", "tail order must exceed 1")?;
                ensure(m > 0.0 && m.is_finite(), "M", "tail scale must be positive")
            }
        }
    }
}

/// The transform of `Ê` (and `E_*`) a bound is stated for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "of", rename_all = "snake_case")]
pub enum Scale {
    /// `√(Ê / E_*)`.
    SqrtRatio,
    /// `Ê^{1/2κ}`.
    Root { kappa: f64 },
    /// `Ê` itself.
    Raw,
}

impl Scale {
    pub fn apply(&self, hat_e: f64, estar: f64) -> f64 {
        match *self {
            Scale::SqrtRatio => (hat_e / estar).sqrt(),
            Scale::Root { kappa } => hat_e.powf(1.0 / (2.0 * kappa)),
            Scale::Raw => hat_e,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            Scale::SqrtRatio => "sqrt(hat_e/estar)".into(),
            Scale::Root { kappa: 1.0 } => "sqrt(hat_e)".into(),
            Scale::Root { kappa } => format!("hat_e^(1/{})", 2.0 * kappa),
            Scale::Raw => "hat_e".into(),
        }
    }
}

/// How a bound value is meant to be compared against simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Statement {
    /// `(E X^m)^{1/m} <= value` for the scaled risk `X`.
    Moment { m: f64 },
    /// `P(X >= value) <= e^{-t}`.
    Tail { t: f64 },
}

impl From<BoundMode> for Statement {
    fn from(mode: BoundMode) -> Self {
        match mode {
            BoundMode::Tail { t } => Statement::Tail { t },
            BoundMode::Moment { m } => Statement::Moment { m },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub bound: String,
    pub value: f64,
    pub scale: Scale,
    pub statement: Statement,
    /// Active branch name.
    pub branch: String,
    /// Summands (or factors) of the active branch.
    pub terms: BTreeMap<String, f64>,
    /// Value of every branch that applies to these inputs, including the
    /// active one, each on its own stated scale.
    pub branches: BTreeMap<String, f64>,
    pub valid: BTreeMap<String, bool>,
    pub inputs: BTreeMap<String, f64>,
    pub notes: Vec<String>,
}

impl BoundReport {
    fn new(bound: &str, statement: Statement) -> Self {
        Self {
            bound: bound.to_string(),
            value: f64::NAN,
            scale: Scale::Raw,
            statement,
            branch: String::new(),
            terms: BTreeMap::new(),
            branches: BTreeMap::new(),
            valid: BTreeMap::new(),
            inputs: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    fn input(mut self, name: &str, v: f64) -> Self {
        self.inputs.insert(name.to_string(), v);
        self
    }

    fn inputs_from(mut self, cx: &Complexity) -> Self {
        self.inputs.insert("n".into(), cx.n);
        self.inputs.insert("p".into(), cx.p as f64);
        self.inputs.insert("delta".into(), cx.delta());
        self
    }

    fn term(&mut self, name: &str, v: f64) {
        self.terms.insert(name.to_string(), v);
    }

    fn select(&mut self, branch: &str, value: f64, scale: Scale) {
        self.branch = branch.to_string();
        self.value = value;
        self.scale = scale;
        self.branches.insert(branch.to_string(), value);
    }

    /// Flat key/value form: nested maps become `terms.x`, `valid.x`, ...
    pub fn to_flat_json(&self) -> serde_json::Value {
        let mut out = serde_json::Map::new();
        out.insert("bound".into(), self.bound.clone().into());
        out.insert("value".into(), json_num(self.value));
        out.insert("scale".into(), self.scale.label().into());
        match self.statement {
            Statement::Moment { m } => {
                out.insert("statement".into(), "moment".into());
                out.insert("m".into(), json_num(m));
            }
            Statement::Tail { t } => {
                out.insert("statement".into(), "tail".into());
                out.insert("t".into(), json_num(t));
            }
        }
        out.insert("branch".into(), self.branch.clone().into());
        for (prefix, map) in [("terms", &self.terms), ("branches", &self.branches), ("inputs", &self.inputs)] {
            for (k, v) in map {
                out.insert(format!("{prefix}.{k}"), json_num(*v));
            }
        }
        for (k, v) in &self.valid {
            out.insert(format!("valid.{k}"), (*v).into());
        }
        out.insert("notes".into(), self.notes.join("; ").into());
        serde_json::Value::Object(out)
    }
}

fn json_num(v: f64) -> serde_json::Value {
    serde_json::Number::from_f64(v).map_or_else(|| v.to_string().into(), serde_json::Value::Number)
}

const A_NOTE: &str = "A(kappa) uses the (2 kappa)^(1/(2 kappa - 1)) denominator, so A(1) = 1";

/// `A(κ) = (1 + (2κ-1)^{1/(2κ-1)}) / (2κ)^{1/(2κ-1)}`.
pub fn a_kappa(kappa: f64) -> f64 {
    let q = 2.0 * kappa - 1.0;
    (1.0 + q.powf(1.0 / q)) / (2.0 * kappa).powf(1.0 / q)
}

/// `a^{1/(1+a)} + a^{-a/(1+a)}`, the minimum of `x + a^{...}` type
/// trade-offs; equal to `C̃(1, a)`.
pub fn balance_constant(a: f64) -> f64 {
    a.powf(1.0 / (1.0 + a)) + a.powf(-a / (1.0 + a))
}

/// `c_s = 2√(2/π) Γ((s+1)/2)^{1/s}`.
pub fn gaussian_moment_constant(s: f64) -> f64 {
    2.0 * (2.0 / std::f64::consts::PI).sqrt() * gamma((s + 1.0) / 2.0).powf(1.0 / s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantSet {
    pub kappa: f64,
    pub s: f64,
    pub m: f64,
    pub a: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Present when `m < 2sκ`.
    pub xi: Option<f64>,
    pub b: Option<f64>,
    pub ctilde: Option<f64>,
    /// Present when `m < 2s`.
    pub c_ms: Option<f64>,
    pub c_prime_ms: Option<f64>,
    pub valid: BTreeMap<String, bool>,
}

pub fn evaluate_constants(kappa: f64, s: f64, m: f64) -> Result<ConstantSet> {
    ensure(kappa >= 1.0 && kappa.is_finite(), "kappa", "must be >= 1")?;
    ensure(s > 1.0 && s.is_finite(), "s", "must exceed 1")?;
    ensure(m >= 1.0 && m.is_finite(), "m", "must be >= 1")?;
    let a = a_kappa(kappa);
    let alpha = 1.0 / (2.0 * kappa - 1.0);
    let beta = s / m - 1.0 / (2.0 * kappa);
    let power_ok = m < 2.0 * s * kappa;
    let quad_ok = m < 2.0 * s;
    let mut valid = BTreeMap::new();
    valid.insert("m_lt_2s_kappa".to_string(), power_ok);
    valid.insert("m_lt_2s".to_string(), quad_ok);
    valid.insert("a_lt_2".to_string(), a < 2.0);

    let (xi, b, ct) = if power_ok {
        let w = alpha / (alpha + beta);
        let ct = ctilde(alpha, beta);
        let r = m / (2.0 * s * kappa - m);
        let xi = a.powf(beta / (alpha + beta))
            * 2f64.powf(w / (2.0 * kappa))
            * r.powf(w / m)
            * ct;
        let b = 2f64.powf(1.0 / (2.0 * kappa)) * r.powf(1.0 / m);
        (Some(xi), Some(b), Some(ct))
    } else {
        (None, None, None)
    };
    let (c_ms, c_prime) = if quad_ok {
        let c = (m / (2.0 * s - m)).powf(2.0 / (2.0 * s + m)) * balance_constant((2.0 * s - m) / (2.0 * m));
        let cp = c.powf((2.0 * s + m) / (4.0 * s)) * balance_constant((2.0 * s - m) / (2.0 * s + m));
        (Some(c), Some(cp))
    } else {
        (None, None)
    };
    Ok(ConstantSet {
        kappa,
        s,
        m,
        a,
        alpha,
        beta,
        xi,
        b,
        ctilde: ct,
        c_ms,
        c_prime_ms: c_prime,
        valid,
    })
}

fn check_estar(estar: f64, name: &'static str) -> Result<()> {
    ensure(estar >= 0.0 && estar.is_finite(), name, "must be finite and >= 0")
}

fn check_positive(v: f64, name: &'static str) -> Result<()> {
    ensure(v > 0.0 && v.is_finite(), name, "must be positive")
}

fn check_nonneg(v: f64, name: &'static str) -> Result<()> {
    ensure(v >= 0.0 && v.is_finite(), name, "must be finite and >= 0")
}

/// Quadratic margin (`κ = 1`, constant `C`) with exponential moments
/// (scale `K`); both branches are on the `√Ê` scale.
pub fn bound_quadratic_exp(cx: &Complexity, c: f64, k: f64, estar: f64, mode: BoundMode) -> Result<BoundReport> {
    check_positive(c, "C")?;
    check_nonneg(k, "K")?;
    check_estar(estar, "estar")?;
    let e = mode.effective_term(cx, cx.max_moment())?;
    let mut r = BoundReport::new("quadratic_exp", mode.into())
        .inputs_from(cx)
        .input("C", c)
        .input("K", k)
        .input("estar", estar);
    let small = (c + 2.0 * k.sqrt()) * e.sqrt();
    let main_ok = estar > k * e;
    r.valid.insert("estar_above_k_e".into(), main_ok);
    if estar > 0.0 {
        let main = estar.sqrt() + c * e.sqrt() + k * e / estar.sqrt();
        r.branches.insert("main".into(), main);
    }
    if main_ok {
        r.term("sqrt_estar", estar.sqrt());
        r.term("variance", c * e.sqrt());
        r.term("scale", k * e / estar.sqrt());
        let main = r.branches["main"];
        r.select("main", main, Scale::Root { kappa: 1.0 });
        r.term("normalized", main / estar.sqrt());
    } else {
        r.term("variance", c * e.sqrt());
        r.term("scale", 2.0 * (k * e).sqrt());
        r.select("small_estar", small, Scale::Root { kappa: 1.0 });
    }
    Ok(r)
}

/// Likelihood version with mixing weight ½: `K̂` in place of `Ê`, unit
/// scale. The main branch is on the `√(K̂/K_*)` scale, the small branch on
/// `√K̂`.
pub fn bound_mle(cx: &Complexity, c: f64, kstar: f64, mode: BoundMode) -> Result<BoundReport> {
    check_positive(c, "C")?;
    check_estar(kstar, "kstar")?;
    let e = mode.effective_term(cx, cx.max_moment())?;
    let mut r = BoundReport::new("mle", mode.into())
        .inputs_from(cx)
        .input("C", c)
        .input("kstar", kstar);
    let small = (c + 2.0) * e.sqrt();
    let main_ok = kstar > e;
    r.valid.insert("kstar_above_e".into(), main_ok);
    r.branches.insert("small_kstar".into(), small);
    if kstar > 0.0 {
        let main = 1.0 + c * (e / kstar).sqrt() + e / kstar;
        r.branches.insert("main".into(), main);
    }
    if main_ok {
        r.term("one", 1.0);
        r.term("variance", c * (e / kstar).sqrt());
        r.term("scale", e / kstar);
        let main = r.branches["main"];
        r.select("main", main, Scale::SqrtRatio);
    } else {
        r.term("variance", c * e.sqrt());
        r.term("scale", 2.0 * e.sqrt());
        r.select("small_kstar", small, Scale::Root { kappa: 1.0 });
    }
    r.notes.push("risk is the excess of the midpoint (f_hat + f_star)/2".into());
    Ok(r)
}

/// Quadratic margin with a power-tailed envelope (order `s`, scale `M`).
pub fn bound_quadratic_power(cx: &Complexity, c: f64, s: f64, scale_m: f64, estar: f64, m: f64) -> Result<BoundReport> {
    check_positive(c, "C")?;
    check_nonneg(scale_m, "M")?;
    check_estar(estar, "estar")?;
    ensure(s > 1.0, "s", "tail order must exceed 1")?;
    check_moment_order(m, cx.max_moment())?;
    if m >= 2.0 * s {
        return Err(Error::TruncatedMomentDiverges { m, two_s: 2.0 * s });
    }
    let k = evaluate_constants(1.0, s, m)?;
    let (cms, cpr) = (k.c_ms.expect("m < 2s"), k.c_prime_ms.expect("m < 2s"));
    let d = cx.delta();
    let two_s = 2.0 * s;
    let crossover = cms.powf((two_s + m) / two_s)
        * ((two_s - m) / (two_s + m)).powf((two_s + m) / two_s)
        * scale_m
        * d.powf((two_s - m) / two_s);
    let mut r = BoundReport::new("quadratic_power", Statement::Moment { m })
        .inputs_from(cx)
        .input("C", c)
        .input("s", s)
        .input("M", scale_m)
        .input("estar", estar)
        .input("crossover", crossover);
    r.term("c_ms", cms);
    let small = c * d.sqrt() + cpr * scale_m.sqrt() * d.powf((two_s - m) / (2.0 * two_s));
    r.branches.insert("small_estar".into(), small);
    let main_ok = estar > crossover;
    r.valid.insert("estar_above_crossover".into(), main_ok);
    if estar > 0.0 {
        let heavy = cms * (scale_m / estar).powf(two_s / (two_s + m)) * d.powf((two_s - m) / (two_s + m));
        let main = 1.0 + c * (d / estar).sqrt() + heavy;
        r.branches.insert("main".into(), main);
        if main_ok {
            r.term("one", 1.0);
            r.term("variance", c * (d / estar).sqrt());
            r.term("heavy_tail", heavy);
            r.select("main", main, Scale::SqrtRatio);
            return Ok(r);
        }
    }
    r.term("c_prime_ms", cpr);
    r.term("variance", c * d.sqrt());
    r.term("heavy_tail", small - c * d.sqrt());
    r.select("small_estar", small, Scale::Root { kappa: 1.0 });
    Ok(r)
}

/// Least squares with `p` candidates and noise `s`-th moment `M^s`; bounds
/// `(E (√Ê)^s)^{1/s}`.
pub fn bound_small_p_ls(cx: &Complexity, c: f64, s: f64, scale_m: f64, estar: f64) -> Result<BoundReport> {
    check_positive(c, "C")?;
    check_nonneg(scale_m, "M")?;
    check_estar(estar, "estar")?;
    ensure(s > 1.0, "s", "moment order must exceed 1")?;
    let cs = gaussian_moment_constant(s);
    let p = cx.p as f64;
    let noise = c * cs * p.powf(1.0 / s) * scale_m / cx.n.sqrt();
    let mut r = BoundReport::new("small_p_least_squares", Statement::Moment { m: s })
        .inputs_from(cx)
        .input("C", c)
        .input("s", s)
        .input("M", scale_m)
        .input("estar", estar);
    r.term("c_s", cs);
    r.term("noise", noise);
    r.term("sqrt_estar", estar.sqrt());
    let squared = (c * cs * cx.n.powf(-(s - 1.0) / (2.0 * s)) * scale_m + estar.sqrt()).powi(2);
    r.term("squared_form", squared);
    r.valid.insert("p_le_sqrt_n".into(), p <= cx.n.sqrt());
    r.select("main", noise + estar.sqrt(), Scale::Root { kappa: 1.0 });
    r.notes.push("squared_form bounds E hat_e and holds when p <= sqrt(n)".into());
    Ok(r)
}

/// General margin `G` with conjugate `H`: bound on `E Ê`.
///
/// Requires `H(v^{1/r})` concave for some `r <= 1 + log p`; this is
/// spot-checked on a grid and reported in `valid`.
#[allow(clippy::too_many_arguments)]
pub fn bound_general_margin_expectation(
    spec: &MarginSpec,
    cx: &Complexity,
    k: f64,
    estar: f64,
    delta_opt: f64,
    eps_floor: f64,
    r_order: f64,
) -> Result<BoundReport> {
    spec.validate()?;
    check_nonneg(k, "K")?;
    check_estar(estar, "estar")?;
    ensure(delta_opt > 0.0 && delta_opt < 1.0, "delta", "must lie in (0, 1)")?;
    check_positive(eps_floor, "eps")?;
    check_positive(r_order, "r")?;
    let d = cx.delta();
    let ginv = margin_inverse(spec, estar.max(eps_floor))?;
    let arg = d.sqrt() / delta_opt + k * d / (delta_opt * ginv);
    let h = conjugate_H(spec, arg)?;
    let value = (2.0 * delta_opt * h + (1.0 + delta_opt) * estar) / (1.0 - delta_opt);
    let stated_arg = d.sqrt() / delta_opt + k * d / (2.0 * delta_opt * ginv);
    let stated = (2.0 * delta_opt * conjugate_H(spec, stated_arg)? + (1.0 + delta_opt) * estar) / (1.0 - delta_opt);

    let mut rep = BoundReport::new("general_margin_expectation", Statement::Moment { m: 1.0 })
        .inputs_from(cx)
        .input("K", k)
        .input("estar", estar)
        .input("delta_opt", delta_opt)
        .input("eps", eps_floor)
        .input("r", r_order);
    rep.term("argument", arg);
    rep.term("conjugate", h);
    rep.term("g_inverse", ginv);
    rep.term("statement_form", stated);
    rep.valid.insert("r_le_1_plus_log_p".into(), r_order <= cx.max_moment() + 1e-12);
    rep.valid.insert("h_root_concave".into(), spot_check_root_concave(spec, r_order, arg)?);
    rep.select("main", value, Scale::Raw);
    rep.notes.push(
        "uses the larger conjugate argument K delta/(delta_opt G^-1); statement_form halves that term".into(),
    );
    Ok(rep)
}

/// Second differences of `v ↦ H(v^{1/r})` on a log grid reaching past
/// `arg^r`.
fn spot_check_root_concave(spec: &MarginSpec, r: f64, arg: f64) -> Result<bool> {
    let top = (4.0 * arg.max(1.0)).powf(r);
    let vs = logspace(top * 1e-6, top, 400);
    let hs: Vec<f64> = vs
        .iter()
        .map(|v| conjugate_H(spec, v.powf(1.0 / r)))
        .collect::<Result<_>>()?;
    if hs.iter().any(|h| !h.is_finite()) {
        return Ok(false);
    }
    let scale = hs.iter().fold(1e-300f64, |a, h| a.max(h.abs()));
    Ok((1..vs.len() - 1).all(|i| {
        let (x0, x1, x2) = (vs[i - 1], vs[i], vs[i + 1]);
        let chord = hs[i - 1] + (hs[i + 1] - hs[i - 1]) * (x1 - x0) / (x2 - x0);
        hs[i] >= chord - 1e-9 * scale
    }))
}

/// Power margin `(κ, C)` with exponential moments; value on the `Ê^{1/2κ}`
/// scale. An explicit `tau` floors `E_*` and always uses the main form.
#[allow(clippy::too_many_arguments)]
pub fn bound_general_margin_exp(
    cx: &Complexity,
    kappa: f64,
    c: f64,
    k: f64,
    estar: f64,
    mode: BoundMode,
    tau: Option<f64>,
) -> Result<BoundReport> {
    ensure(kappa >= 1.0 && kappa.is_finite(), "kappa", "must be >= 1")?;
    check_positive(c, "C")?;
    check_nonneg(k, "K")?;
    check_estar(estar, "estar")?;
    if let Some(t) = tau {
        check_positive(t, "tau")?;
    }
    let e = mode.effective_term(cx, cx.max_moment() * (2.0 * kappa - 1.0))?;
    let a = a_kappa(kappa);
    let alpha = 1.0 / (2.0 * kappa - 1.0);
    let root = |x: f64| x.powf(1.0 / (2.0 * kappa));
    let mut r = BoundReport::new("general_margin_exp", mode.into())
        .inputs_from(cx)
        .input("kappa", kappa)
        .input("C", c)
        .input("K", k)
        .input("estar", estar);
    r.term("a_kappa", a);
    r.notes.push(A_NOTE.into());
    let scale = Scale::Root { kappa };
    let small = a * (c * e.sqrt()).powf(alpha) + 2.0 * root(k * e);
    let main_at = |floor: f64| root(floor) + a * (c * e.sqrt() + k * e / root(floor)).powf(alpha);
    let main_ok = estar > k * e;
    r.valid.insert("estar_above_k_e".into(), main_ok);
    if estar > 0.0 {
        r.branches.insert("main".into(), main_at(estar));
    }
    if let Some(t) = tau {
        let floor = estar.max(t);
        r.inputs.insert("tau".into(), t);
        r.term("root_floor", root(floor));
        r.term("fluctuation", main_at(floor) - root(floor));
        r.select("floored", main_at(floor), scale);
    } else if main_ok {
        r.term("root_estar", root(estar));
        r.term("fluctuation", main_at(estar) - root(estar));
        r.select("main", main_at(estar), scale);
    } else {
        r.term("fluctuation", a * (c * e.sqrt()).powf(alpha));
        r.term("scale", 2.0 * root(k * e));
        r.select("small_estar", small, scale);
    }
    if !main_ok {
        r.branches.insert("small_estar".into(), small);
    }
    Ok(r)
}

fn check_master_range(cx: &Complexity, kappa: f64, s: f64, m: f64) -> Result<()> {
    let upper = (2.0 * s * kappa).min(cx.max_moment());
    ensure(m >= 2.0 * kappa, "m", "moment order must be >= 2 kappa")?;
    if m > upper + 1e-12 {
        return Err(Error::MomentOrder { m, limit: upper });
    }
    ensure(m < 2.0 * s * kappa, "m", "moment order must be < 2 s kappa")
}

/// Power margin `(κ, C)` with a power-tailed envelope `(s, M)`, floored at
/// `τ`; value on the `Ê^{1/2κ}` scale.
#[allow(clippy::too_many_arguments)]
pub fn bound_master_power(
    cx: &Complexity,
    kappa: f64,
    c: f64,
    s: f64,
    scale_m: f64,
    estar: f64,
    m: f64,
    tau: f64,
) -> Result<BoundReport> {
    ensure(kappa >= 1.0 && kappa.is_finite(), "kappa", "must be >= 1")?;
    check_positive(c, "C")?;
    check_nonneg(scale_m, "M")?;
    check_estar(estar, "estar")?;
    check_positive(tau, "tau")?;
    ensure(s > 1.0, "s", "tail order must exceed 1")?;
    check_master_range(cx, kappa, s, m)?;
    let k = evaluate_constants(kappa, s, m)?;
    let xi = k.xi.expect("m < 2 s kappa");
    let (al, be) = (k.alpha, k.beta);
    let d = cx.delta();
    let floor = estar.max(tau);
    let m_exp = s / m * al / (al + be);
    let d_exp = al * be / (al + be);
    let f_exp = -d_exp / (2.0 * kappa);
    let mut r = BoundReport::new("master_power", Statement::Moment { m })
        .inputs_from(cx)
        .input("kappa", kappa)
        .input("C", c)
        .input("s", s)
        .input("M", scale_m)
        .input("estar", estar)
        .input("tau", tau);
    let heavy = xi * scale_m.powf(m_exp) * d.powf(d_exp) * floor.powf(f_exp);
    r.term("root_floor", floor.powf(1.0 / (2.0 * kappa)));
    r.term("variance", k.a * c.powf(al) * d.powf(al / 2.0));
    r.term("heavy_tail", heavy);
    r.term("xi", xi);
    r.term("exp_m", m_exp);
    r.term("exp_delta", d_exp);
    r.term("exp_floor", f_exp);
    let value = r.terms["root_floor"] + r.terms["variance"] + heavy;
    r.select("floored", value, Scale::Root { kappa });
    r.notes.push(A_NOTE.into());
    Ok(r)
}

/// The master bounds with the floor `τ` optimized away.
pub fn bound_optimized_floor(cx: &Complexity, kappa: f64, c: f64, tail: TailSpec, estar: f64, m: f64) -> Result<BoundReport> {
    ensure(kappa >= 1.0 && kappa.is_finite(), "kappa", "must be >= 1")?;
    check_positive(c, "C")?;
    check_estar(estar, "estar")?;
    tail.validate()?;
    let a = a_kappa(kappa);
    let alpha = 1.0 / (2.0 * kappa - 1.0);
    let d = cx.delta();
    let root = estar.powf(1.0 / (2.0 * kappa));
    let mut r = BoundReport::new("optimized_floor", Statement::Moment { m })
        .inputs_from(cx)
        .input("kappa", kappa)
        .input("C", c)
        .input("estar", estar);
    r.notes.push(A_NOTE.into());
    r.term("root_estar", root);
    match tail {
        TailSpec::ExpMoment { k } => {
            check_moment_order(m, cx.max_moment() * (2.0 * kappa - 1.0))?;
            r.inputs.insert("K".into(), k);
            let var = (c * d.sqrt()).powf(alpha);
            let sc = a.sqrt() * (k * d).powf(1.0 / (2.0 * kappa));
            r.term("variance", var);
            r.term("scale", sc);
            r.select("exp_moment", root + var + sc, Scale::Root { kappa });
        }
        TailSpec::PowerTail { s, m: scale_m } => {
            check_master_range(cx, kappa, s, m)?;
            r.inputs.insert("s".into(), s);
            r.inputs.insert("M".into(), scale_m);
            let k = evaluate_constants(kappa, s, m)?;
            let xi = k.xi.expect("m < 2 s kappa");
            let (al, be) = (k.alpha, k.beta);
            let e = al * be / (al + be);
            // x + B x^{-e} with x = τ^{1/2κ}, minimized over x.
            let b_coef = xi * scale_m.powf(s / m * al / (al + be)) * d.powf(e);
            let xi_opt = ctilde(1.0, e) * xi.powf(1.0 / (1.0 + e));
            let heavy = xi_opt * scale_m.powf(s / m * al / (al + be + al * be)) * d.powf(al * be / (al + be + al * be));
            let var = a * c.powf(al) * d.powf(al / 2.0);
            r.term("variance", var);
            r.term("heavy_tail", heavy);
            r.term("xi_optimized", xi_opt);
            if b_coef > 0.0 {
                let (x0, _) = min_power_sum(1.0, b_coef, 1.0, e)?;
                r.term("tau_opt", x0.powf(2.0 * kappa));
            }
            r.select("power_tail", root + var + heavy, Scale::Root { kappa });
            r.notes.push("xi_optimized is obtained by minimizing the floored bound over tau".into());
        }
    }
    Ok(r)
}

/// Ratio of `E_*` to the remainder scale; large values mean `Ê/E_*` should
/// concentrate near one.
pub fn asymptotic_diagnostic(cx: &Complexity, kappa: f64, c: f64, tail: TailSpec, estar: f64) -> Result<f64> {
    ensure(estar > 0.0 && estar.is_finite(), "estar", "must be positive")?;
    ensure(kappa >= 1.0, "kappa", "must be >= 1")?;
    check_positive(c, "C")?;
    tail.validate()?;
    let d = cx.delta();
    let denom = match tail {
        TailSpec::ExpMoment { k } if kappa == 1.0 => (k + c * c) * d,
        TailSpec::ExpMoment { k } => c * d.powf(kappa / (2.0 * kappa - 1.0)) + k * d,
        TailSpec::PowerTail { s, m } if kappa == 1.0 => {
            let c2s = evaluate_constants(1.0, s, 2.0)?
                .c_ms
                .ok_or_else(|| Error::invalid("s", "needs s > 1"))?;
            c * c * d + c2s.powf((s + 1.0) / s) * m * d.powf((s - 1.0) / s)
        }
        TailSpec::PowerTail { .. } => {
            return Err(Error::invalid("kappa", "power-tail diagnostic is defined for kappa = 1 only"))
        }
    };
    Ok(estar / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::margins::MarginSpec;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn cx(delta: f64, p: usize) -> Complexity {
        Complexity::for_delta(delta, p).unwrap()
    }

    #[test]
    fn constants_examples() {
        let k = evaluate_constants(1.0, 3.0, 2.0).unwrap();
        assert_eq!(k.a, 1.0);
        assert_eq!(k.alpha, 1.0);
        assert!(close(k.beta, 3.0 / 2.0 - 0.5, 1e-15));
        let c22 = evaluate_constants(1.0, 2.0, 2.0).unwrap().c_ms.unwrap();
        assert!(close(c22, 2f64.powf(1.0 / 3.0) + 2f64.powf(-2.0 / 3.0), 1e-14));
        assert!(close(c22, 1.889882, 1e-6));
        assert!(close(a_kappa(1.5), (1.0 + 2f64.sqrt()) / 3f64.sqrt(), 1e-15));
        assert!(close(a_kappa(1.5), 1.393847, 1e-6));
        let out = evaluate_constants(1.0, 1.5, 3.0).unwrap();
        assert!(out.xi.is_none() && out.c_ms.is_none());
        assert!(!out.valid["m_lt_2s"]);
    }

    #[test]
    fn xi_example() {
        let xi = evaluate_constants(1.0, 2.0, 2.0).unwrap().xi.unwrap();
        assert!(close(xi, 2f64.powf(1.0 / 3.0) * 1.889882, 1e-5));
        assert!(close(xi, 2.381102, 1e-6), "{xi}");
    }

    #[test]
    fn quadratic_exp_examples() {
        let c = cx(0.03, 10);
        let r = bound_quadratic_exp(&c, 2.0, 1.0, 0.12, BoundMode::Moment { m: 2.0 }).unwrap();
        assert_eq!(r.branch, "main");
        assert!(close(r.value, 0.779423, 1e-6), "{}", r.value);
        let r = bound_quadratic_exp(&c, 2.0, 1.0, 0.01, BoundMode::Moment { m: 2.0 }).unwrap();
        assert_eq!(r.branch, "small_estar");
        assert!(close(r.value, 4.0 * 0.03f64.sqrt(), 1e-12));
        assert!(close(r.value, 0.692820, 1e-6));
        assert!(r.branches.contains_key("main"));
        assert!(bound_quadratic_exp(&c, 2.0, 1.0, -0.1, BoundMode::Moment { m: 2.0 }).is_err());
        let a = bound_quadratic_exp(&c, 2.0, 1.0, 0.12, BoundMode::Tail { t: 1.0 }).unwrap().value;
        let b = bound_quadratic_exp(&c, 2.0, 1.0, 0.12, BoundMode::Tail { t: 10.0 }).unwrap().value;
        assert!(b > a);
    }

    #[test]
    fn mle_examples() {
        let c = cx(0.04, 10);
        let r = bound_mle(&c, 2.0, 0.16, BoundMode::Moment { m: 2.0 }).unwrap();
        assert!(close(r.value, 2.25, 1e-12));
        assert_eq!(r.scale, Scale::SqrtRatio);
        let r = bound_mle(&c, 2.0, 0.01, BoundMode::Moment { m: 2.0 }).unwrap();
        assert!(close(r.value, 0.8, 1e-12));
        let r = bound_mle(&c, 2.0, 1e12, BoundMode::Moment { m: 2.0 }).unwrap();
        assert!(close(r.value, 1.0, 1e-5));
        assert!(bound_mle(&c, 2.0, -1.0, BoundMode::Moment { m: 2.0 }).is_err());
    }

    #[test]
    fn quadratic_power_examples() {
        let c = cx(0.03, 10);
        let r = bound_quadratic_power(&c, 2.0, 2.0, 1.0, 1.0, 2.0).unwrap();
        assert_eq!(r.branch, "main");
        let expect = 1.0 + 2.0 * 0.03f64.sqrt() + 1.889882 * 0.03f64.powf(1.0 / 3.0);
        assert!(close(r.value, expect, 1e-6), "{}", r.value);
        assert!(close(r.value, 1.93364, 1e-5), "{}", r.value);
        let r0 = bound_quadratic_power(&c, 2.0, 2.0, 0.0, 1.0, 2.0).unwrap();
        assert!(close(r0.value, 1.0 + 2.0 * 0.03f64.sqrt(), 1e-15));
        assert!(matches!(
            bound_quadratic_power(&cx(0.03, 1000), 2.0, 1.2, 1.0, 1.0, 2.5),
            Err(Error::TruncatedMomentDiverges { .. })
        ));
    }

    #[test]
    fn small_p_examples() {
        let closed = 2.0 * (2.0 / std::f64::consts::PI).sqrt() * (std::f64::consts::PI.sqrt() / 2.0).sqrt();
        assert!(close(gaussian_moment_constant(2.0), closed, 1e-12));
        assert!(close(gaussian_moment_constant(2.0), 1.50225, 2e-6));
        let c = Complexity::new(400.0, 20).unwrap();
        let r = bound_small_p_ls(&c, 2.0, 2.0, 0.0, 0.0).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.valid["p_le_sqrt_n"]);
        let c = Complexity::new(400.0, 21).unwrap();
        assert!(!bound_small_p_ls(&c, 2.0, 2.0, 1.0, 0.0).unwrap().valid["p_le_sqrt_n"]);
    }

    #[test]
    fn general_expectation_examples() {
        let spec = MarginSpec::power(1.0, 2.0).unwrap();
        let c = cx(0.03, 10);
        let r = bound_general_margin_expectation(&spec, &c, 1.0, 0.16, 0.5, 1e-9, 2.0).unwrap();
        assert!(close(r.terms["argument"], 0.421410, 1e-6));
        assert!(close(r.value, 0.835174, 1e-6), "{}", r.value);
        assert!(r.valid["h_root_concave"]);
        assert!(r.terms["statement_form"] < r.value);

        let tiny = Complexity::new(1e300, 10).unwrap();
        let r = bound_general_margin_expectation(&spec, &tiny, 0.0, 0.16, 0.5, 1e-9, 2.0).unwrap();
        assert!(close(r.value, 1.5 * 0.16 / 0.5, 1e-12));

        // estar = 0: the conjugate term behaves like C²Δ/(2δ) as δ -> 0.
        for dl in [1e-2, 1e-3] {
            let r = bound_general_margin_expectation(&spec, &c, 0.0, 0.0, dl, 1.0, 2.0).unwrap();
            let limit = 4.0 * 0.03 / (2.0 * dl);
            assert!(close(r.value * (1.0 - dl), limit, 1e-9 * limit));
        }
        // H(v^{1/r}) = v^{2/r} is concave only for r >= 2.
        let r = bound_general_margin_expectation(&spec, &c, 1.0, 0.16, 0.5, 1e-9, 1.5).unwrap();
        assert!(!r.valid["h_root_concave"]);
        assert!(bound_general_margin_expectation(&spec, &c, 1.0, 0.16, 1.0, 1e-9, 2.0).is_err());
    }

    #[test]
    fn general_exp_examples() {
        let c = cx(0.03, 10);
        let m2 = BoundMode::Moment { m: 2.0 };
        let r = bound_general_margin_exp(&c, 1.0, 2.0, 1.0, 0.12, m2, None).unwrap();
        assert!(close(r.value, 0.779423, 1e-6));
        let r = bound_general_margin_exp(&c, 1.0, 2.0, 1.0, 0.01, m2, None).unwrap();
        assert!(close(r.value, 0.692820, 1e-6));
        let r = bound_general_margin_exp(&c, 1.5, 2.0, 0.0, 0.2, m2, None).unwrap();
        let expect = 0.2f64.powf(1.0 / 3.0) + a_kappa(1.5) * (2.0 * 0.03f64.sqrt()).powf(0.5);
        assert!(close(r.value, expect, 1e-14));
        // m range grows with κ.
        assert!(bound_general_margin_exp(&c, 1.0, 2.0, 1.0, 0.12, BoundMode::Moment { m: 4.0 }, None).is_err());
        assert!(bound_general_margin_exp(&c, 2.0, 2.0, 1.0, 0.12, BoundMode::Moment { m: 4.0 }, None).is_ok());
    }

    #[test]
    fn master_and_optimized_floor_examples() {
        let c = cx(0.03, 10);
        let r = bound_master_power(&c, 1.0, 2.0, 2.0, 1.0, 0.1, 2.0, 0.1).unwrap();
        assert!(close(r.terms["exp_m"], 2.0 / 3.0, 1e-12));
        assert!(close(r.terms["exp_delta"], 1.0 / 3.0, 1e-12));
        let r0 = bound_master_power(&c, 1.0, 2.0, 2.0, 0.0, 0.1, 2.0, 0.1).unwrap();
        assert!(close(r0.value, 0.1f64.sqrt() + 2.0 * 0.03f64.sqrt(), 1e-12));
        assert!(bound_master_power(&c, 1.0, 2.0, 2.0, 1.0, 0.1, 1.5, 0.1).is_err());

        let d = cx(0.04, 10);
        let r = bound_optimized_floor(&d, 1.0, 2.0, TailSpec::ExpMoment { k: 1.0 }, 0.09, 2.0).unwrap();
        assert!(close(r.value, 0.3 + 0.4 + 0.2, 1e-12));
        let tiny = Complexity::new(1e300, 10).unwrap();
        let r = bound_optimized_floor(&tiny, 1.0, 2.0, TailSpec::ExpMoment { k: 1.0 }, 0.09, 2.0).unwrap();
        assert!(close(r.value, 0.3, 1e-12));
        // Δ exponent αβ/(α+β+αβ) = 1/4 at κ = 1, s = m = 2.
        let k = evaluate_constants(1.0, 2.0, 2.0).unwrap();
        let (al, be) = (k.alpha, k.beta);
        assert!(close(al * be / (al + be + al * be), 0.25, 1e-15));
    }

    #[test]
    fn optimized_floor_dominates_master() {
        for &(kappa, s, m, estar) in &[(1.0, 2.0, 2.0, 0.05), (1.0, 3.0, 2.5, 0.0), (1.2, 2.5, 2.4, 0.01)] {
            let c = Complexity::new(5000.0, 200).unwrap();
            let tail = TailSpec::PowerTail { s, m: 1.5 };
            let floor = bound_optimized_floor(&c, kappa, 2.0, tail, estar, m).unwrap();
            let tau = floor.terms["tau_opt"];
            let master = bound_master_power(&c, kappa, 2.0, s, 1.5, estar, m, tau).unwrap();
            assert!(floor.value >= master.value - 1e-10, "{kappa} {s} {m}");
            if estar == 0.0 {
                assert!(close(floor.value, master.value, 1e-10));
            }
        }
    }

    #[test]
    fn diagnostic_examples() {
        let c = cx(0.01, 10);
        let tail = TailSpec::ExpMoment { k: 1.0 };
        assert!(close(asymptotic_diagnostic(&c, 1.0, 2.0, tail, 0.5).unwrap(), 10.0, 1e-12));
        assert!(close(asymptotic_diagnostic(&c, 1.0, 2.0, tail, 0.05).unwrap(), 1.0, 1e-12));
        let one = asymptotic_diagnostic(&c, 1.5, 2.0, tail, 0.3).unwrap();
        assert!(close(asymptotic_diagnostic(&c, 1.5, 2.0, tail, 0.6).unwrap(), 2.0 * one, 1e-12));
        assert!(asymptotic_diagnostic(&c, 1.0, 2.0, tail, 0.0).is_err());
        assert!(asymptotic_diagnostic(&c, 1.5, 2.0, TailSpec::PowerTail { s: 2.0, m: 1.0 }, 0.3).is_err());
    }

    #[test]
    fn flat_json_has_prefixed_keys() {
        let c = cx(0.03, 10);
        let r = bound_quadratic_exp(&c, 2.0, 1.0, 0.12, BoundMode::Moment { m: 2.0 }).unwrap();
        let v = r.to_flat_json();
        assert!(v["value"].as_f64().is_some());
        assert!(v["terms.variance"].as_f64().is_some());
        assert_eq!(v["valid.estar_above_k_e"], true);
        assert_eq!(v["branch"], "main");
    }

    proptest! {
        #[test]
        fn a_kappa_below_two(kappa in 1.0f64..10.0) {
            prop_assert!(a_kappa(kappa) < 2.0);
        }

        #[test]
        fn xi_identity_at_kappa_one(s in 1.1f64..8.0, frac in 0.05f64..0.95) {
            let m = 1.0 + frac * (2.0 * s - 1.0);
            let k = evaluate_constants(1.0, s, m).unwrap();
            let lhs = k.xi.unwrap();
            let rhs = 2f64.powf(m / (2.0 * s + m)) * k.c_ms.unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs);
        }

        #[test]
        fn kappa_one_reduction(
            c in 0.1f64..5.0, k in 0.0f64..3.0, d in 1e-4f64..0.5, estar in 0.0f64..2.0,
            tail in proptest::bool::ANY, t in 0.01f64..5.0, m in 1.0f64..3.0,
        ) {
            let cx = Complexity::for_delta(d, 20).unwrap();
            let mode = if tail { BoundMode::Tail { t } } else { BoundMode::Moment { m } };
            let a = bound_quadratic_exp(&cx, c, k, estar, mode).unwrap();
            let b = bound_general_margin_exp(&cx, 1.0, c, k, estar, mode, None).unwrap();
            prop_assert!((a.value - b.value).abs() <= 1e-12 * a.value.abs().max(1e-300));
            prop_assert_eq!(a.branch, b.branch);
        }
    }
}
