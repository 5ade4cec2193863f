//! Bernstein-type bounds for the maximum of `p` averages and the auxiliary
//! inequalities behind the risk bounds, with Monte Carlo property checkers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::erm::{moment_norm, tail_frequency, MomentEstimate, TailEstimate};
use crate::error::{ensure, Error, Result};
use crate::numeric::{bisect, linspace};

/// Sample size and candidate count; `n` is real so that a target `Δ` can be
/// hit exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Complexity {
    pub n: f64,
    pub p: usize,
}

impl Complexity {
    pub fn new(n: f64, p: usize) -> Result<Self> {
        ensure(n >= 1.0 && n.is_finite(), "n", "sample size must be >= 1")?;
        ensure(p >= 1, "p", "candidate count must be >= 1")?;
        Ok(Self { n, p })
    }

    /// The complexity whose `Δ` equals `delta` for `p` candidates.
    pub fn for_delta(delta: f64, p: usize) -> Result<Self> {
        ensure(delta > 0.0, "delta", "must be positive")?;
        Self::new(2.0 * (2.0 * p as f64).ln() / delta, p)
    }

    pub fn delta(&self) -> f64 {
        delta(self.n, self.p)
    }

    /// `Δ + 2t/n`, the tail-mode counterpart of `Δ`.
    pub fn tail_term(&self, t: f64) -> f64 {
        self.delta() + 2.0 * t / self.n
    }

    /// Largest moment order `1 + log p` covered by the moment inequality.
    pub fn max_moment(&self) -> f64 {
        1.0 + (self.p as f64).ln()
    }
}

/// `Δ = 2 log(2p) / n`.
pub fn delta(n: f64, p: usize) -> f64 {
    2.0 * (2.0 * p as f64).ln() / n
}

/// Probability (tail) or moment form of a bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundMode {
    Tail { t: f64 },
    Moment { m: f64 },
}

impl BoundMode {
    /// Exactly one of `t` and `m` must be given.
    pub fn from_flags(t: Option<f64>, m: Option<f64>) -> Result<Self> {
        match (t, m) {
            (Some(t), None) => Ok(BoundMode::Tail { t }),
            (None, Some(m)) => Ok(BoundMode::Moment { m }),
            (Some(_), Some(_)) => Err(Error::Usage("give either t (tail) or m (moment), not both".into())),
            (None, None) => Err(Error::Usage("one of t (tail) or m (moment) is required".into())),
        }
    }

    /// `Δ + 2t/n` in tail mode, `Δ` in moment mode, after range checks
    /// (`t > 0`; `1 <= m <= m_limit`).
    pub(crate) fn effective_term(&self, cx: &Complexity, m_limit: f64) -> Result<f64> {
        match *self {
            BoundMode::Tail { t } => {
                ensure(t > 0.0 && t.is_finite(), "t", "must be positive")?;
                Ok(cx.tail_term(t))
            }
            BoundMode::Moment { m } => {
                check_moment_order(m, m_limit)?;
                Ok(cx.delta())
            }
        }
    }
}

pub(crate) fn check_moment_order(m: f64, limit: f64) -> Result<()> {
    ensure(m >= 1.0, "m", "moment order must be >= 1")?;
    if m > limit + 1e-12 {
        return Err(Error::MomentOrder { m, limit });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BernsteinParams {
    pub cx: Complexity,
    pub k: f64,
    pub tau: Option<f64>,
}

impl BernsteinParams {
    pub fn new(n: f64, p: usize, k: f64, tau: Option<f64>) -> Result<Self> {
        ensure(k >= 0.0 && k.is_finite(), "K", "must be finite and >= 0")?;
        if let Some(tau) = tau {
            ensure(tau > 0.0, "tau", "weight floor must be positive")?;
        }
        Ok(Self {
            cx: Complexity::new(n, p)?,
            k,
            tau,
        })
    }
}

/// Threshold exceeded by `max_j |P_n γ_j^c|` with probability at most `e^{-t}`.
pub fn bernstein_tail_threshold(cx: &Complexity, k: f64, t: f64) -> Result<f64> {
    ensure(k >= 0.0, "K", "must be >= 0")?;
    ensure(t > 0.0, "t", "must be positive")?;
    let l = (2.0 * cx.p as f64).ln() + t;
    Ok((2.0 * l / cx.n).sqrt() + 2.0 * k * l / cx.n)
}

/// Bound `√Δ + KΔ` on `(E max_j |P_n γ_j^c|^m)^{1/m}`, valid for
/// `1 <= m <= 1 + log p`.
pub fn bernstein_moment_bound(cx: &Complexity, k: f64, m: f64) -> Result<f64> {
    ensure(k >= 0.0, "K", "must be >= 0")?;
    check_moment_order(m, cx.max_moment())?;
    let d = cx.delta();
    Ok(d.sqrt() + k * d)
}

/// Bernstein bound for `max_j |P_n(γ_j^c - γ_*^c)| / (d_j ∨ τ)`.
pub fn weighted_bernstein(params: &BernsteinParams, mode: BoundMode) -> Result<f64> {
    let tau = params
        .tau
        .ok_or_else(|| Error::invalid("tau", "weighted bound needs a weight floor"))?;
    let e = mode.effective_term(&params.cx, params.cx.max_moment())?;
    Ok(e.sqrt() + params.k * e / tau)
}

/// Both sides of Jensen's inequality for functions that are increasing on
/// `[0, ∞)` and concave on `[c, ∞)`: `E g(|X|) <= g(E|X| + c P(|X| < c))`.
///
/// The shape of `g` is spot-checked on a grid covering the samples.
pub fn jensen_partly_concave_bound(
    g: impl Fn(f64) -> f64,
    c: f64,
    samples: &[f64],
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::NoSamples);
    }
    ensure(c >= 0.0, "c", "concavity start must be >= 0")?;
    let top = samples.iter().fold(c, |acc, x| acc.max(x.abs())) + 1.0;
    spot_check_partly_concave(&g, c, top)?;

    let n = samples.len() as f64;
    let lhs = samples.iter().map(|x| g(x.abs())).sum::<f64>() / n;
    let mean_abs = samples.iter().map(|x| x.abs()).sum::<f64>() / n;
    let below = samples.iter().filter(|x| x.abs() < c).count() as f64 / n;
    Ok((lhs, g(mean_abs + c * below)))
}

fn spot_check_partly_concave(g: &impl Fn(f64) -> f64, c: f64, top: f64) -> Result<()> {
    let grid = linspace(0.0, top, 513);
    let vals: Vec<f64> = grid.iter().map(|&x| g(x)).collect();
    let scale = vals.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if vals.windows(2).any(|w| w[1] < w[0] - 1e-12 * scale) {
        return Err(Error::ShapeCheck("g is not increasing on [0, ∞)".into()));
    }
    let tail = linspace(c, top, 513);
    let tv: Vec<f64> = tail.iter().map(|&x| g(x)).collect();
    if tv.windows(3).any(|w| w[0] + w[2] - 2.0 * w[1] > 1e-9 * scale) {
        return Err(Error::ShapeCheck(format!("g is not concave on [{c}, ∞)")));
    }
    Ok(())
}

/// Bound `(m/(2s-m)) M^s K^{-(2s-m)/2}` on `P Γ^{m/2} 1{Γ > K}` for an
/// envelope with power tails of order `s` and scale `M`.
pub fn truncated_moment_bound(s: f64, scale_m: f64, m: f64, k: f64) -> Result<f64> {
    ensure(s > 1.0, "s", "tail order must exceed 1")?;
    ensure(scale_m >= 0.0, "M", "tail scale must be >= 0")?;
    ensure(m > 0.0, "m", "must be positive")?;
    ensure(k > 0.0, "K", "truncation level must be positive")?;
    if m >= 2.0 * s {
        return Err(Error::TruncatedMomentDiverges { m, two_s: 2.0 * s });
    }
    Ok(m / (2.0 * s - m) * scale_m.powf(s) * k.powf(-(2.0 * s - m) / 2.0))
}

/// `(β/α)^{α/(α+β)} + (α/β)^{β/(α+β)}`.
pub fn ctilde(alpha: f64, beta: f64) -> f64 {
    let sum = alpha + beta;
    (beta / alpha).powf(alpha / sum) + (alpha / beta).powf(beta / sum)
}

/// Minimizer and minimum of `a x^α + b x^{-β}` over `x > 0`.
pub fn min_power_sum(a: f64, b: f64, alpha: f64, beta: f64) -> Result<(f64, f64)> {
    for (name, v) in [("a", a), ("b", b), ("alpha", alpha), ("beta", beta)] {
        ensure(v > 0.0 && v.is_finite(), name, "must be positive")?;
    }
    let sum = alpha + beta;
    let x0 = (b * beta / (a * alpha)).powf(1.0 / sum);
    let min = ctilde(alpha, beta) * a.powf(beta / sum) * b.powf(alpha / sum);
    Ok((x0, min))
}

/// Upper bound on `a^{1/2κ}` for any `a` with `a <= b + c(a^{1/2κ} + b^{1/2κ})`.
pub fn invert_recursive_bound(b: f64, c: f64, kappa: f64) -> Result<f64> {
    ensure(kappa >= 1.0, "kappa", "must be >= 1")?;
    ensure(c > 0.0, "c", "must be positive")?;
    ensure(b >= 0.0, "b", "must be >= 0")?;
    let q = 2.0 * kappa - 1.0;
    Ok((1.0 + q.powf(1.0 / q)) * (c / (2.0 * kappa)).powf(1.0 / q) + b.powf(1.0 / (2.0 * kappa)))
}

/// Monte Carlo validity checks for the inequalities above. Each checker
/// takes its random stream explicitly.
pub mod checks {
    use super::*;

    /// Distribution of the centered, bounded loss columns.
    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum CenteredColumns {
        /// ±1 with equal probability.
        Rademacher,
        /// Uniform on [-1, 1].
        Uniform,
    }

    #[derive(Debug, Clone)]
    pub struct BernsteinCheck {
        pub tails: Vec<(f64, f64, TailEstimate)>,
        pub moments: Vec<(f64, MomentEstimate)>,
    }

    /// Simulates `max_j |P_n γ_j^c|` over `reps` replications of `p`
    /// independent centered columns (`|γ^c| <= 1`, so the moment condition
    /// holds with `K = 1`).
    ///
    /// Returns per `t`: (threshold, `e^{-t}`, exceedance frequency), and per
    /// `m`: the moment-norm estimate.
    pub fn bernstein_max(
        n: usize,
        p: usize,
        columns: CenteredColumns,
        ts: &[f64],
        ms: &[f64],
        reps: usize,
        rng: &mut impl Rng,
    ) -> Result<BernsteinCheck> {
        let cx = Complexity::new(n as f64, p)?;
        let maxima: Vec<f64> = (0..reps)
            .map(|_| {
                (0..p)
                    .map(|_| column_mean(n, columns, rng).abs())
                    .fold(0.0, f64::max)
            })
            .collect();
        let mut tails = Vec::with_capacity(ts.len());
        for &t in ts {
            let threshold = bernstein_tail_threshold(&cx, 1.0, t)?;
            tails.push((threshold, (-t).exp(), tail_frequency(&maxima, threshold)?));
        }
        let mut moments = Vec::with_capacity(ms.len());
        for &m in ms {
            moments.push((bernstein_moment_bound(&cx, 1.0, m)?, moment_norm(&maxima, m)?));
        }
        Ok(BernsteinCheck { tails, moments })
    }

    fn column_mean(n: usize, columns: CenteredColumns, rng: &mut impl Rng) -> f64 {
        match columns {
            CenteredColumns::Rademacher => {
                let mut ones = 0u32;
                let mut left = n;
                while left > 0 {
                    let take = left.min(64);
                    let word: u64 = rng.random();
                    let mask = if take == 64 { u64::MAX } else { (1u64 << take) - 1 };
                    ones += (word & mask).count_ones();
                    left -= take;
                }
                (2.0 * ones as f64 - n as f64) / n as f64
            }
            CenteredColumns::Uniform => {
                (0..n).map(|_| rng.random_range(-1.0..=1.0)).sum::<f64>() / n as f64
            }
        }
    }

    /// Largest violations (relative to the larger side) of the two power
    /// expansion inequalities over `samples` draws of `κ ∈ [1, 3]`, with `z`
    /// on `[0, 1]` for the first and `[0, 10]` for the second.
    pub fn power_expansion(samples: usize, rng: &mut impl Rng) -> (f64, f64) {
        let mut first = f64::NEG_INFINITY;
        let mut second = f64::NEG_INFINITY;
        for _ in 0..samples {
            let kappa: f64 = rng.random_range(1.0..=3.0);
            let two_k = 2.0 * kappa;
            let z: f64 = rng.random_range(0.0..=1.0);
            let lhs = (1.0 - z).powf(two_k);
            let rhs = 1.0 - two_k * z.powf(two_k - 1.0) + (two_k - 1.0) * z.powf(two_k);
            first = first.max((lhs - rhs) / lhs.abs().max(rhs.abs()).max(1.0));

            let z: f64 = rng.random_range(0.0..=10.0);
            let lhs = (1.0 + z).powf(two_k);
            let rhs = 1.0 + two_k * z.powf(two_k - 1.0) + z.powf(two_k);
            second = second.max((rhs - lhs) / lhs.max(rhs));
        }
        (first, second)
    }

    /// Largest relative excess of the claimed minimum over `g(x)` at random
    /// `x`, over `trials` random `(a, b, α, β)` with `points` draws each.
    pub fn min_power_sum_optimality(trials: usize, points: usize, rng: &mut impl Rng) -> Result<f64> {
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..trials {
            let a: f64 = rng.random_range(0.01..10.0);
            let b: f64 = rng.random_range(0.01..10.0);
            let alpha: f64 = rng.random_range(0.1..4.0);
            let beta: f64 = rng.random_range(0.1..4.0);
            let (x0, min) = min_power_sum(a, b, alpha, beta)?;
            let g = |x: f64| a * x.powf(alpha) + b * x.powf(-beta);
            worst = worst.max((min - g(x0)).abs() / min);
            for _ in 0..points {
                let x = x0 * (rng.random_range(-4.0f64..4.0)).exp();
                worst = worst.max((min - g(x)) / min);
            }
        }
        Ok(worst)
    }

    /// Solves `y^{2κ} = b + c(y + b^{1/2κ})` for its positive root `y`
    /// (`y = a^{1/2κ}` at the largest admissible `a`) by bisection.
    pub fn recursive_fixed_point(b: f64, c: f64, kappa: f64) -> f64 {
        let two_k = 2.0 * kappa;
        let root_b = b.powf(1.0 / two_k);
        let f = |y: f64| y.powf(two_k) - b - c * (y + root_b);
        let mut hi = 1.0f64.max(root_b);
        while f(hi) <= 0.0 {
            hi *= 2.0;
        }
        bisect(0.0, hi, 200, f)
    }

    /// Largest relative amount by which the fixed-point solution exceeds
    /// [`invert_recursive_bound`] over `samples` random `(b, c, κ)`.
    pub fn recursive_bound_validity(samples: usize, rng: &mut impl Rng) -> Result<f64> {
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..samples {
            let b: f64 = 10f64.powf(rng.random_range(-4.0..2.0));
            let c: f64 = 10f64.powf(rng.random_range(-3.0..2.0));
            let kappa: f64 = rng.random_range(1.0..=4.0);
            let y = recursive_fixed_point(b, c, kappa);
            let bound = invert_recursive_bound(b, c, kappa)?;
            worst = worst.max((y - bound) / bound);
        }
        Ok(worst)
    }

    /// A named function from the Jensen catalog with its concavity start.
    pub struct CatalogEntry {
        pub name: &'static str,
        pub c: f64,
        pub g: Box<dyn Fn(f64) -> f64 + Send + Sync>,
    }

    /// Increasing functions concave beyond `c`: `√x`, `log(1+x)`,
    /// `min(x, c)` plus a square-root tail, and a convex-then-concave spline
    /// (`x²` up to `c`, then a log tail).
    pub fn jensen_catalog() -> Vec<CatalogEntry> {
        let c = 1.5;
        vec![
            CatalogEntry { name: "sqrt", c: 0.0, g: Box::new(f64::sqrt) },
            CatalogEntry { name: "log1p", c: 0.0, g: Box::new(f64::ln_1p) },
            CatalogEntry {
                name: "capped_identity_then_sqrt",
                c,
                g: Box::new(move |x: f64| x.min(c) + (x - c).max(0.0).sqrt()),
            },
            CatalogEntry {
                name: "square_then_log",
                c,
                g: Box::new(move |x: f64| {
                    if x <= c {
                        x * x
                    } else {
                        c * c + 2.0 * c * (x - c + 1.0).ln()
                    }
                }),
            },
        ]
    }

    /// Worst `lhs - rhs` (relative) over the catalog for `samples` draws of a
    /// heavy-ish symmetric variable.
    pub fn jensen_validity(samples: usize, rng: &mut impl Rng) -> Result<Vec<(&'static str, f64, f64)>> {
        let xs: Vec<f64> = (0..samples)
            .map(|_| {
                let u: f64 = crate::rng::open_unit(rng);
                let mag = -2.0 * u.ln();
                if rng.random::<bool>() { mag } else { -mag }
            })
            .collect();
        jensen_catalog()
            .into_iter()
            .map(|e| {
                let (lhs, rhs) = jensen_partly_concave_bound(&e.g, e.c, &xs)?;
                Ok((e.name, lhs, rhs))
            })
            .collect()
    }
}
