//! Synthetic selection problems whose population quantities (excess risks,
//! variances, centered moments) are exact finite sums.

use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bounds::TailSpec;
use crate::erm::{LossTable, RiskProfile};
use crate::error::{ensure, Error, Result};
use crate::margins::{half_kl, hellinger2_values, log_ratio_sd, DensityGrid, DistanceAnchor, MarginSpec, TsybakovSpec};
use crate::numeric::{factorial, gamma, logspace, CompensatedSum};
use crate::rng::{open_unit, StreamRng};

/// Symmetric noise with `P(|ε| <= u) = 1 - (1+u)^{-s}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoubleParetoSpec {
    pub s: f64,
}

impl DoubleParetoSpec {
    pub fn new(s: f64) -> Result<Self> {
        ensure(s > 2.0 && s.is_finite(), "s", "double Pareto parameter must exceed 2")?;
        Ok(Self { s })
    }
}

pub fn sample_double_pareto<R: Rng + ?Sized>(spec: &DoubleParetoSpec, rng: &mut R) -> f64 {
    let mag = open_unit(rng).powf(-1.0 / spec.s) - 1.0;
    if rng.random::<bool>() { mag } else { -mag }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum Noise {
    Gaussian { sigma: f64 },
    DoublePareto { s: f64 },
}

impl Noise {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Noise::Gaussian { sigma } => ensure(sigma >= 0.0 && sigma.is_finite(), "sigma", "must be >= 0"),
            Noise::DoublePareto { s } => DoubleParetoSpec::new(s).map(|_| ()),
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            Noise::Gaussian { sigma } => sigma * sigma,
            Noise::DoublePareto { s } => 2.0 / ((s - 1.0) * (s - 2.0)),
        }
    }

    /// `E|ε|^m`, infinite when the moment does not exist.
    pub fn abs_moment(&self, m: f64) -> f64 {
        match *self {
            Noise::Gaussian { sigma } => {
                sigma.powf(m) * 2f64.powf(m / 2.0) * gamma((m + 1.0) / 2.0) / std::f64::consts::PI.sqrt()
            }
            Noise::DoublePareto { s } if m < s => gamma(m + 1.0) * gamma(s - m) / gamma(s),
            Noise::DoublePareto { .. } => f64::INFINITY,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Noise::Gaussian { sigma } => sigma * rng.sample::<f64, _>(StandardNormal),
            Noise::DoublePareto { s } => sample_double_pareto(&DoubleParetoSpec { s }, rng),
        }
    }
}

/// A claimed parameter together with where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Claim<T> {
    pub value: T,
    pub provenance: String,
}

impl<T> Claim<T> {
    pub fn new(value: T, provenance: impl Into<String>) -> Self {
        Self {
            value,
            provenance: provenance.into(),
        }
    }
}

/// Fixed-design least squares: `Y_i = f_0(X_i) + ε_i`.
#[derive(Debug, Clone)]
pub struct Regression {
    design: Vec<f64>,
    f0: Vec<f64>,
    /// `candidates[j][i] = f_j(X_i)`.
    candidates: Vec<Vec<f64>>,
    noise: Noise,
}

impl Regression {
    pub fn design(&self) -> &[f64] {
        &self.design
    }

    pub fn noise(&self) -> Noise {
        self.noise
    }
}

/// Finite population of i.i.d. observations: atom `a` has probability
/// `probs[a]` and candidate losses `loss[a]`.
#[derive(Debug, Clone)]
pub struct Atoms {
    probs: Vec<f64>,
    loss: Vec<Vec<f64>>,
    target: Vec<f64>,
    index: WeightedIndex<f64>,
}

impl Atoms {
    fn new(probs: Vec<f64>, loss: Vec<Vec<f64>>, target: Vec<f64>) -> Result<Self> {
        let index = WeightedIndex::new(&probs).map_err(|e| Error::invalid("weights", e.to_string()))?;
        Ok(Self {
            probs,
            loss,
            target,
            index,
        })
    }

    fn mean(&self, f: impl Fn(usize) -> f64) -> f64 {
        (0..self.probs.len())
            .map(|a| self.probs[a] * f(a))
            .collect::<CompensatedSum>()
            .value()
    }

    fn centered_abs_moment(&self, f: impl Fn(usize) -> f64, m: f64) -> f64 {
        let mu = self.mean(&f);
        self.mean(|a| (f(a) - mu).abs().powf(m))
    }
}

#[derive(Debug, Clone)]
pub struct Classification {
    weights: Vec<f64>,
    eta: Vec<f64>,
    bayes: Vec<f64>,
    candidates: Vec<Vec<f64>>,
}

impl Classification {
    pub fn bayes_rule(&self) -> &[f64] {
        &self.bayes
    }

    /// Smallest `C_1 >= 1` with `P(|1 - 2η| < v) <= (C_1 v)^{1/γ}` for all
    /// `v ∈ (0, 1]` on this design.
    pub fn fit_tsybakov(&self, gamma: f64) -> Result<TsybakovSpec> {
        ensure(gamma > 0.0, "gamma", "must be positive; gamma = 0 is the hard-margin fit")?;
        let mut levels: Vec<(f64, f64)> = self
            .eta
            .iter()
            .zip(&self.weights)
            .map(|(e, w)| ((1.0 - 2.0 * e).abs(), *w))
            .collect();
        levels.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut mass = 0.0;
        let mut c1: f64 = 1.0;
        for (a, w) in levels {
            mass += w;
            c1 = c1.max(mass.powf(gamma) / a);
        }
        TsybakovSpec::new(c1, gamma)
    }

    /// `min |1 - 2η|`, the level below which `H_1` vanishes.
    pub fn hard_margin(&self) -> f64 {
        self.eta.iter().map(|e| (1.0 - 2.0 * e).abs()).fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone)]
pub struct DensityFamily {
    grid: DensityGrid,
    target: Vec<f64>,
    candidates: Vec<Vec<f64>>,
    /// Support index of each atom.
    support_index: Vec<usize>,
}

impl DensityFamily {
    pub fn grid(&self) -> &DensityGrid {
        &self.grid
    }
}

type SamplerFn = dyn Fn(&mut StreamRng) -> Result<LossTable> + Send + Sync;

/// A caller-supplied sampler; exact population quantities are unavailable.
#[derive(Clone)]
pub struct CustomSampler(Arc<SamplerFn>);

impl CustomSampler {
    pub fn new(f: impl Fn(&mut StreamRng) -> Result<LossTable> + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }
}

impl fmt::Debug for CustomSampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CustomSampler")
    }
}

#[derive(Debug, Clone)]
pub enum Population {
    Regression(Regression),
    Classification(Classification, Atoms),
    Density(DensityFamily, Atoms),
    Custom(CustomSampler),
}

/// One replication's test sample.
#[derive(Debug, Clone)]
pub struct Draw {
    pub table: LossTable,
    /// Atoms drawn, for i.i.d. discrete populations.
    pub atoms: Option<Vec<usize>>,
}

/// Exact excess of the mixture `α f̂ + (1-α) f_*` and the empirical check
/// `P_n γ_mix <= P_n γ_*` on the same sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureOutcome {
    pub hat_e_alpha: f64,
    pub empirical_mix: f64,
    pub empirical_star: f64,
}

impl MixtureOutcome {
    pub fn holds(&self) -> bool {
        self.empirical_mix <= self.empirical_star + 1e-12 * (1.0 + self.empirical_star.abs())
    }
}

#[derive(Debug, Clone)]
pub struct ProblemInstance {
    n: usize,
    p: usize,
    risk: RiskProfile,
    population: Population,
    margin_meta: Claim<MarginSpec>,
    tail_meta: Claim<TailSpec>,
}

impl ProblemInstance {
    pub fn custom(
        n: usize,
        risk: RiskProfile,
        sampler: CustomSampler,
        margin: Claim<MarginSpec>,
        tail: Claim<TailSpec>,
    ) -> Result<Self> {
        ensure(n >= 1, "n", "must be >= 1")?;
        margin.value.validate()?;
        tail.value.validate()?;
        Ok(Self {
            n,
            p: risk.len(),
            risk,
            population: Population::Custom(sampler),
            margin_meta: margin,
            tail_meta: tail,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn risk(&self) -> &RiskProfile {
        &self.risk
    }

    pub fn population(&self) -> &Population {
        &self.population
    }

    pub fn margin_meta(&self) -> &Claim<MarginSpec> {
        &self.margin_meta
    }

    pub fn tail_meta(&self) -> &Claim<TailSpec> {
        &self.tail_meta
    }

    pub fn with_margin_meta(mut self, claim: Claim<MarginSpec>) -> Result<Self> {
        claim.value.validate()?;
        self.margin_meta = claim;
        Ok(self)
    }

    pub fn with_tail_meta(mut self, claim: Claim<TailSpec>) -> Result<Self> {
        claim.value.validate()?;
        self.tail_meta = claim;
        Ok(self)
    }

    /// Regression noise law, if this is a regression problem.
    pub fn noise(&self) -> Option<Noise> {
        match &self.population {
            Population::Regression(r) => Some(r.noise),
            _ => None,
        }
    }

    pub fn sample(&self, rng: &mut StreamRng) -> Result<Draw> {
        let (n, p) = (self.n, self.p);
        match &self.population {
            Population::Regression(r) => {
                let mut loss = Vec::with_capacity(n * p);
                let mut target = Vec::with_capacity(n);
                for i in 0..n {
                    let eps = r.noise.sample(rng);
                    let y = r.f0[i] + eps;
                    loss.extend(r.candidates.iter().map(|f| (y - f[i]).powi(2)));
                    target.push(eps * eps);
                }
                Ok(Draw {
                    table: LossTable::new(n, p, loss)?.with_target(target)?,
                    atoms: None,
                })
            }
            Population::Classification(_, atoms) | Population::Density(_, atoms) => {
                let drawn: Vec<usize> = (0..n).map(|_| atoms.index.sample(rng)).collect();
                let mut loss = Vec::with_capacity(n * p);
                for &a in &drawn {
                    loss.extend_from_slice(&atoms.loss[a]);
                }
                let target = drawn.iter().map(|&a| atoms.target[a]).collect();
                Ok(Draw {
                    table: LossTable::new(n, p, loss)?.with_target(target)?,
                    atoms: Some(drawn),
                })
            }
            Population::Custom(CustomSampler(f)) => {
                let table = f(rng)?;
                if table.n() != n || table.p() != p {
                    return Err(Error::Dimension(format!(
                        "sampler produced a {}x{} table, expected {n}x{p}",
                        table.n(),
                        table.p()
                    )));
                }
                Ok(Draw { table, atoms: None })
            }
        }
    }

    /// Mixture outcome for convex (likelihood) problems; `None` otherwise.
    pub fn mixture(&self, alpha: f64, selected: usize, draw: &Draw) -> Option<Result<MixtureOutcome>> {
        let Population::Density(fam, atoms) = &self.population else {
            return None;
        };
        let drawn = draw.atoms.as_ref()?;
        Some((|| {
            ensure((0.0..=1.0).contains(&alpha), "alpha", "mixing weight must lie in [0, 1]")?;
            let star = self.risk.star_index();
            let (fh, fs) = (&fam.candidates[selected], &fam.candidates[star]);
            let mix: Vec<f64> = fh.iter().zip(fs).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
            let hat_e_alpha = half_kl(fam.grid.mu(), &fam.target, &mix)?.max(0.0);
            let n = drawn.len() as f64;
            let empirical_mix = drawn
                .iter()
                .map(|&a| -0.5 * mix[fam.support_index[a]].ln())
                .collect::<CompensatedSum>()
                .value()
                / n;
            let empirical_star = drawn
                .iter()
                .map(|&a| atoms.loss[a][star])
                .collect::<CompensatedSum>()
                .value()
                / n;
            Ok(MixtureOutcome {
                hat_e_alpha,
                empirical_mix,
                empirical_star,
            })
        })())
    }

    /// Exact distances: `σ(γ_j - γ_0)` (target) or `σ(γ_j - γ_*)` (best),
    /// except for likelihood problems, whose target distance is `C h(f_j, f_0)`.
    pub fn distances(&self, anchor: DistanceAnchor) -> Result<Vec<f64>> {
        let star = self.risk.star_index();
        match (&self.population, anchor) {
            (Population::Regression(r), _) => {
                let var = r.noise.variance();
                let base: &[f64] = match anchor {
                    DistanceAnchor::Target => &r.f0,
                    DistanceAnchor::Best => &r.candidates[star],
                };
                Ok(r.candidates
                    .iter()
                    .map(|f| (4.0 * var * mean_sq_diff(f, base)).sqrt())
                    .collect())
            }
            (Population::Density(fam, _), DistanceAnchor::Target) => {
                let (_, c) = self
                    .margin_meta
                    .value
                    .power_params()
                    .ok_or(Error::MissingDistances("target"))?;
                Ok(fam
                    .candidates
                    .iter()
                    .map(|f| c * hellinger2_values(fam.grid.mu(), f, &fam.target).sqrt())
                    .collect())
            }
            (Population::Density(fam, _), DistanceAnchor::Best) => Ok(fam
                .candidates
                .iter()
                .map(|f| log_ratio_sd(fam.grid.mu(), &fam.target, f, &fam.candidates[star]))
                .collect()),
            (Population::Classification(_, atoms), _) => Ok((0..self.p)
                .map(|j| {
                    let g = |a: usize| match anchor {
                        DistanceAnchor::Target => atoms.loss[a][j] - atoms.target[a],
                        DistanceAnchor::Best => atoms.loss[a][j] - atoms.loss[a][star],
                    };
                    atoms.centered_abs_moment(g, 2.0).sqrt()
                })
                .collect()),
            (Population::Custom(_), DistanceAnchor::Target) => Err(Error::MissingDistances("target")),
            (Population::Custom(_), DistanceAnchor::Best) => Err(Error::MissingDistances("best")),
        }
    }

    /// `P|γ_j^c - γ_*^c|^m` for every candidate.
    pub fn centered_excess_moments(&self, m: f64) -> Result<Vec<f64>> {
        let star = self.risk.star_index();
        match &self.population {
            Population::Regression(r) => {
                let em = r.noise.abs_moment(m);
                let fs = &r.candidates[star];
                Ok(r.candidates
                    .iter()
                    .map(|f| {
                        let s = mean_of(f.iter().zip(fs).map(|(a, b)| (2.0 * (a - b).abs()).powf(m)));
                        if s == 0.0 { 0.0 } else { s * em }
                    })
                    .collect())
            }
            Population::Classification(_, atoms) | Population::Density(_, atoms) => Ok((0..self.p)
                .map(|j| atoms.centered_abs_moment(|a| atoms.loss[a][j] - atoms.loss[a][star], m))
                .collect()),
            Population::Custom(_) => Err(Error::ExactMomentsUnavailable),
        }
    }

    /// `(var(γ_j - γ_0), var(e_j - e_0), var(l_j - l_0))`.
    pub fn decomposition(&self, j: usize) -> Result<(f64, f64, f64)> {
        match &self.population {
            Population::Regression(r) => {
                let e = 4.0 * r.noise.variance() * mean_sq_diff(&r.candidates[j], &r.f0);
                Ok((e, e, 0.0))
            }
            Population::Classification(c, atoms) => {
                let total = atoms.centered_abs_moment(|a| atoms.loss[a][j] - atoms.target[a], 2.0);
                let diff: Vec<f64> = c.candidates[j].iter().zip(&c.bayes).map(|(f, b)| f - b).collect();
                let e_part: f64 = (0..c.weights.len())
                    .map(|x| c.weights[x] * 4.0 * c.eta[x] * (1.0 - c.eta[x]) * diff[x] * diff[x])
                    .sum();
                let l: Vec<f64> = (0..c.weights.len()).map(|x| diff[x] * (1.0 - 2.0 * c.eta[x])).collect();
                let l_mean: f64 = (0..l.len()).map(|x| c.weights[x] * l[x]).sum();
                let l_part: f64 = (0..l.len()).map(|x| c.weights[x] * (l[x] - l_mean).powi(2)).sum();
                Ok((total, e_part, l_part))
            }
            _ => Err(Error::DecompositionUnavailable),
        }
    }

    /// `reps · n` draws of the envelope `Γ = max_j |γ_j^c - γ_*^c|`.
    pub fn envelope_samples(&self, rng: &mut StreamRng, reps: usize) -> Result<Vec<f64>> {
        let star = self.risk.star_index();
        match &self.population {
            Population::Regression(r) => {
                let fs = &r.candidates[star];
                let spread: Vec<f64> = (0..self.n)
                    .map(|i| r.candidates.iter().map(|f| (f[i] - fs[i]).abs()).fold(0.0, f64::max))
                    .collect();
                let mut out = Vec::with_capacity(reps * self.n);
                for _ in 0..reps {
                    for d in &spread {
                        out.push(2.0 * r.noise.sample(rng).abs() * d);
                    }
                }
                Ok(out)
            }
            Population::Classification(_, atoms) | Population::Density(_, atoms) => {
                let means: Vec<f64> = (0..self.p)
                    .map(|j| atoms.mean(|a| atoms.loss[a][j] - atoms.loss[a][star]))
                    .collect();
                let env: Vec<f64> = (0..atoms.probs.len())
                    .map(|a| {
                        (0..self.p)
                            .map(|j| (atoms.loss[a][j] - atoms.loss[a][star] - means[j]).abs())
                            .fold(0.0, f64::max)
                    })
                    .collect();
                Ok((0..reps * self.n).map(|_| env[atoms.index.sample(rng)]).collect())
            }
            Population::Custom(_) => Err(Error::ExactMomentsUnavailable),
        }
    }
}

fn mean_of(it: impl Iterator<Item = f64>) -> f64 {
    let mut k = 0usize;
    let s = it
        .inspect(|_| k += 1)
        .collect::<CompensatedSum>()
        .value();
    s / k as f64
}

fn mean_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    mean_of(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)))
}

/// Smallest `K` (to bisection precision) for which the moment condition
/// holds for orders `3..=m_max` with best-anchored distances.
pub fn fit_exp_moment_scale(problem: &ProblemInstance, m_max: u32) -> Result<f64> {
    ensure(m_max >= 2, "m_max", "must be >= 2")?;
    let d = problem.distances(DistanceAnchor::Best)?;
    let moments: Vec<(f64, Vec<f64>)> = (3..=m_max)
        .map(|m| Ok((m as f64, problem.centered_excess_moments(m as f64)?)))
        .collect::<Result<_>>()?;
    let worst = |k: f64| {
        let mut w: f64 = 0.0;
        for (m, mom) in &moments {
            let scale = factorial(*m) / 2.0 * (2.0 * k).powf(m - 2.0);
            for (x, dj) in mom.iter().zip(&d) {
                if *x > 0.0 {
                    w = w.max(x / (scale * dj * dj));
                }
            }
        }
        w
    };
    if worst(f64::MIN_POSITIVE.sqrt()) <= 1.0 {
        return Ok(f64::MIN_POSITIVE.sqrt());
    }
    let mut hi = 1.0;
    while worst(hi) > 1.0 {
        hi *= 2.0;
    }
    let mut lo = hi / 2.0;
    while worst(lo) <= 1.0 {
        lo /= 2.0;
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if worst(mid) <= 1.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Fixed-design regression from values at the design points.
pub fn make_regression(
    design: Vec<f64>,
    f0: Vec<f64>,
    candidates: Vec<Vec<f64>>,
    noise: Noise,
    tail_order: Option<f64>,
) -> Result<ProblemInstance> {
    noise.validate()?;
    let n = design.len();
    ensure(n >= 1, "design", "need at least one design point")?;
    ensure(!candidates.is_empty(), "candidates", "need at least one candidate")?;
    if f0.len() != n || candidates.iter().any(|f| f.len() != n) {
        return Err(Error::Dimension(format!(
            "every function must have one value per design point ({n})"
        )));
    }
    ensure(
        f0.iter().chain(candidates.iter().flatten()).all(|x| x.is_finite()),
        "candidates",
        "values must be finite",
    )?;
    let excess: Vec<f64> = candidates.iter().map(|f| mean_sq_diff(f, &f0)).collect();
    let risk = RiskProfile::new(excess)?;
    let var = noise.variance();
    let margin = if var > 0.0 {
        Claim::new(MarginSpec::power(1.0, 2.0 * var.sqrt())?, "fixed design: C^2 = 4 var(noise)")
    } else {
        Claim::new(MarginSpec::power(1.0, f64::MIN_POSITIVE.sqrt())?, "noiseless: any C > 0")
    };
    let mut problem = ProblemInstance {
        n,
        p: candidates.len(),
        risk,
        population: Population::Regression(Regression {
            design,
            f0,
            candidates,
            noise,
        }),
        margin_meta: margin,
        tail_meta: Claim::new(TailSpec::ExpMoment { k: 1.0 }, "placeholder"),
    };
    problem.tail_meta = match noise {
        Noise::Gaussian { .. } => {
            if tail_order.is_some() {
                return Err(Error::invalid("tail_order", "only meaningful for double Pareto noise"));
            }
            let k = fit_exp_moment_scale(&problem, 12)?;
            Claim::new(TailSpec::ExpMoment { k }, "fitted: smallest K passing orders 3..=12")
        }
        Noise::DoublePareto { s } => {
            let order = tail_order.unwrap_or(s);
            ensure(order > 1.0 && order <= s, "tail_order", "must lie in (1, s]")?;
            let Population::Regression(r) = &problem.population else { unreachable!() };
            let fs = &r.candidates[problem.risk.star_index()];
            let spread_s = mean_of((0..n).map(|i| {
                r.candidates
                    .iter()
                    .map(|f| (f[i] - fs[i]).abs())
                    .fold(0.0, f64::max)
                    .powf(order)
            }));
            let m = (2.0 * spread_s.powf(1.0 / order)).max(f64::MIN_POSITIVE);
            Claim::new(
                TailSpec::PowerTail { s: order, m },
                "derived: P(|noise| > u) <= u^-s averaged over the design",
            )
        }
    };
    Ok(problem)
}

/// Candidates `f_j = √E_j · w_j` around `f_0 = 0`, where `w_j(i)` is the
/// sign `(-1)^{popcount(i & (j+1))}`, so that the excess risks are exactly
/// `excess` while different candidates point in different directions.
pub fn regression_family(n: usize, excess: &[f64], noise: Noise, tail_order: Option<f64>) -> Result<ProblemInstance> {
    ensure(n >= 1, "n", "must be >= 1")?;
    ensure(excess.iter().all(|e| *e >= 0.0 && e.is_finite()), "excess", "must be finite and >= 0")?;
    let candidates = excess
        .iter()
        .enumerate()
        .map(|(j, e)| {
            (0..n)
                .map(|i| if (i & (j + 1)).count_ones() % 2 == 0 { e.sqrt() } else { -e.sqrt() })
                .collect()
        })
        .collect();
    let design = (0..n).map(|i| i as f64 / n as f64).collect();
    make_regression(design, vec![0.0; n], candidates, noise, tail_order)
}

/// Spikes of height `n^{1/2s}` at the first `√n` design points, plus the
/// target `f_0 ≡ 0` as the last candidate; double Pareto noise.
pub fn make_lower_bound_construction(n: usize, s: f64) -> Result<ProblemInstance> {
    DoubleParetoSpec::new(s)?;
    let root = (n as f64).sqrt().round() as usize;
    ensure(root * root == n, "n", "must be a perfect square")?;
    ensure(n as f64 >= 2f64.powf(2.0 * s), "n", "must be at least 2^(2s)")?;
    let height = (n as f64).powf(1.0 / (2.0 * s));
    let mut candidates: Vec<Vec<f64>> = (0..root)
        .map(|j| (0..n).map(|i| if i == j { height } else { 0.0 }).collect())
        .collect();
    candidates.push(vec![0.0; n]);
    let design = (0..n).map(|i| i as f64).collect();
    let problem = make_regression(design, vec![0.0; n], candidates, Noise::DoublePareto { s }, None)?;
    let c = (8.0 / ((s - 2.0) * (s - 1.0))).sqrt();
    problem
        .with_margin_meta(Claim::new(MarginSpec::power(1.0, c)?, "claimed: C^2 = 8/((s-2)(s-1))"))?
        .with_tail_meta(Claim::new(TailSpec::PowerTail { s, m: 2.0 }, "claimed: M = 2"))
}

/// 0/1 classification on a weighted finite design with `η(x) = P(Y=1|x)`.
pub fn make_classification(
    n: usize,
    weights: Vec<f64>,
    eta: Vec<f64>,
    candidates: Vec<Vec<f64>>,
) -> Result<ProblemInstance> {
    ensure(n >= 1, "n", "must be >= 1")?;
    let k = weights.len();
    ensure(k >= 1, "weights", "need at least one design point")?;
    if eta.len() != k || candidates.iter().any(|f| f.len() != k) {
        return Err(Error::Dimension(format!("every function must have one value per design point ({k})")));
    }
    ensure(!candidates.is_empty(), "candidates", "need at least one candidate")?;
    ensure(weights.iter().all(|w| *w > 0.0 && w.is_finite()), "weights", "must be positive")?;
    ensure(eta.iter().all(|e| (0.0..=1.0).contains(e)), "eta", "must lie in [0, 1]")?;
    ensure(eta.iter().all(|e| *e != 0.5), "eta", "eta = 1/2 makes the Bayes rule ambiguous")?;
    ensure(
        candidates.iter().flatten().all(|f| (0.0..=1.0).contains(f)),
        "candidates",
        "values must lie in [0, 1]",
    )?;
    let total: f64 = weights.iter().sum();
    let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let bayes: Vec<f64> = eta.iter().map(|e| if 1.0 - 2.0 * e < 0.0 { 1.0 } else { 0.0 }).collect();
    let excess = candidates
        .iter()
        .map(|f| {
            (0..k)
                .map(|x| weights[x] * (f[x] - bayes[x]).abs() * (1.0 - 2.0 * eta[x]).abs())
                .sum()
        })
        .collect();
    let risk = RiskProfile::new(excess)?;

    let loss = |f: f64, y: f64| (1.0 - y) * f + y * (1.0 - f);
    let mut probs = Vec::with_capacity(2 * k);
    let mut atom_loss = Vec::with_capacity(2 * k);
    let mut target = Vec::with_capacity(2 * k);
    for x in 0..k {
        for y in [0.0, 1.0] {
            probs.push(weights[x] * if y == 1.0 { eta[x] } else { 1.0 - eta[x] });
            atom_loss.push(candidates.iter().map(|f| loss(f[x], y)).collect());
            target.push(loss(bayes[x], y));
        }
    }
    let design = Classification {
        weights,
        eta,
        bayes,
        candidates,
    };
    let c1 = design.hard_margin();
    let margin = Claim::new(
        MarginSpec::power(1.0, 1.0 / c1.sqrt())?,
        format!("fitted: hard margin |1 - 2 eta| >= {c1}"),
    );
    Ok(ProblemInstance {
        n,
        p: design.candidates.len(),
        risk,
        population: Population::Classification(design, Atoms::new(probs, atom_loss, target)?),
        margin_meta: margin,
        tail_meta: Claim::new(TailSpec::ExpMoment { k: 1.0 }, "0/1 loss: excess losses bounded by 1"),
    })
}

/// Finite density family with loss `-log(f)/2` and observations from `f0`.
pub fn make_density_family(n: usize, grid: DensityGrid, f0: &str, candidates: &[String]) -> Result<ProblemInstance> {
    ensure(n >= 1, "n", "must be >= 1")?;
    ensure(!candidates.is_empty(), "candidates", "need at least one candidate")?;
    let target = grid.get(f0)?.to_vec();
    let values: Vec<Vec<f64>> = candidates
        .iter()
        .map(|c| grid.get(c).map(<[f64]>::to_vec))
        .collect::<Result<_>>()?;
    let mu = grid.mu().to_vec();
    let excess = values.iter().map(|f| half_kl(&mu, &target, f)).collect::<Result<Vec<_>>>()?;
    let risk = RiskProfile::new(excess)?;
    let star = &values[risk.star_index()];
    let max_ratio = target
        .iter()
        .zip(star)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| (a / b).sqrt())
        .fold(0.0, f64::max);

    let support_index: Vec<usize> = (0..mu.len()).filter(|&k| target[k] > 0.0).collect();
    let probs = support_index.iter().map(|&k| target[k] * mu[k]).collect();
    let atom_loss = support_index
        .iter()
        .map(|&k| values.iter().map(|f| -0.5 * f[k].ln()).collect())
        .collect();
    let atom_target = support_index.iter().map(|&k| -0.5 * target[k].ln()).collect();
    let atoms = Atoms::new(probs, atom_loss, atom_target)?;
    let family = DensityFamily {
        grid,
        target,
        candidates: values,
        support_index,
    };
    let mut problem = ProblemInstance {
        n,
        p: candidates.len(),
        risk,
        population: Population::Density(family, atoms),
        margin_meta: Claim::new(
            MarginSpec::power(1.0, 8.0 * max_ratio)?,
            "smallest C with sqrt(f0/f_star) <= C/8",
        ),
        tail_meta: Claim::new(TailSpec::ExpMoment { k: 1.0 }, "placeholder"),
    };
    let k = fit_exp_moment_scale(&problem, 12)?;
    problem.tail_meta = Claim::new(TailSpec::ExpMoment { k }, "fitted: smallest K passing orders 3..=12");
    Ok(problem)
}

/// Result of fitting the power-tail scale of the envelope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeFit {
    /// Smallest `M` with `P̂(Γ > x) <= (M/x)^s` on the grid.
    pub m: f64,
    /// Same with `P̂` lowered by three binomial standard errors.
    pub m_lower: f64,
    pub samples: usize,
}

/// Fits `M` on a log grid of thresholds that keep at least 30 exceedances.
pub fn estimate_envelope_m(problem: &ProblemInstance, s: f64, rng: &mut StreamRng, reps: usize) -> Result<EnvelopeFit> {
    ensure(s > 1.0, "s", "must exceed 1")?;
    ensure(reps >= 1, "reps", "must be >= 1")?;
    let mut xs = problem.envelope_samples(rng, reps)?;
    let total = xs.len();
    xs.sort_by(|a, b| b.total_cmp(a));
    let positive = xs.iter().take_while(|x| **x > 0.0).count();
    if positive == 0 {
        return Ok(EnvelopeFit { m: 0.0, m_lower: 0.0, samples: total });
    }
    let hi = xs[(30usize.min(positive)) - 1];
    let lo = xs[positive - 1];
    let grid = if hi > lo { logspace(lo, hi, 400) } else { vec![hi] };
    let (mut m, mut m_lower) = (0.0f64, 0.0f64);
    for x in grid {
        let exceed = xs.partition_point(|v| *v > x);
        let freq = exceed as f64 / total as f64;
        let se = (freq * (1.0 - freq) / total as f64).sqrt();
        m = m.max(x * freq.powf(1.0 / s));
        m_lower = m_lower.max(x * (freq - 3.0 * se).max(0.0).powf(1.0 / s));
    }
    Ok(EnvelopeFit { m, m_lower, samples: total })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedDensity {
    pub name: String,
    pub values: Vec<f64>,
}

/// Serializable problem description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    Regression {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        design: Option<Vec<f64>>,
        f0: Vec<f64>,
        candidates: Vec<Vec<f64>>,
        noise: Noise,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tail_order: Option<f64>,
    },
    RegressionFamily {
        n: usize,
        excess: Vec<f64>,
        noise: Noise,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tail_order: Option<f64>,
    },
    LowerBound {
        n: usize,
        s: f64,
    },
    Classification {
        n: usize,
        weights: Vec<f64>,
        eta: Vec<f64>,
        candidates: Vec<Vec<f64>>,
    },
    Density {
        n: usize,
        support: Vec<f64>,
        mu: Vec<f64>,
        densities: Vec<NamedDensity>,
        target: String,
        candidates: Vec<String>,
        #[serde(default)]
        normalize: bool,
    },
    DensityCsv {
        n: usize,
        path: PathBuf,
        target: String,
        candidates: Vec<String>,
    },
}

impl ProblemConfig {
    pub fn build(&self) -> Result<ProblemInstance> {
        match self {
            ProblemConfig::Regression {
                design,
                f0,
                candidates,
                noise,
                tail_order,
            } => {
                let design = design
                    .clone()
                    .unwrap_or_else(|| (0..f0.len()).map(|i| i as f64).collect());
                make_regression(design, f0.clone(), candidates.clone(), *noise, *tail_order)
            }
            ProblemConfig::RegressionFamily {
                n,
                excess,
                noise,
                tail_order,
            } => regression_family(*n, excess, *noise, *tail_order),
            ProblemConfig::LowerBound { n, s } => make_lower_bound_construction(*n, *s),
            ProblemConfig::Classification {
                n,
                weights,
                eta,
                candidates,
            } => make_classification(*n, weights.clone(), eta.clone(), candidates.clone()),
            ProblemConfig::Density {
                n,
                support,
                mu,
                densities,
                target,
                candidates,
                normalize,
            } => {
                let mut grid = DensityGrid::new(support.clone(), mu.clone())?;
                for d in densities {
                    if *normalize {
                        grid.insert_normalized(&d.name, d.values.clone())?;
                    } else {
                        grid.insert(&d.name, d.values.clone())?;
                    }
                }
                make_density_family(*n, grid, target, candidates)
            }
            ProblemConfig::DensityCsv {
                n,
                path,
                target,
                candidates,
            } => {
                let grid = DensityGrid::from_csv(std::fs::File::open(path)?)?;
                make_density_family(*n, grid, target, candidates)
            }
        }
    }
}
