//! Margin functions, their convex conjugates, the Tsybakov construction,
//! Hellinger geometry on finite supports, and exact checks of the margin and
//! moment conditions on concrete problems.

use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numeric::{factorial, linspace};
use crate::problems::ProblemInstance;

/// Relative tolerance for identities that hold exactly in real arithmetic.
pub const EXACT_TOL: f64 = 1e-12;

/// Which function a distance `d(f_j, ·)` is measured from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceAnchor {
    /// The target `f_0` (margin condition).
    #[default]
    Target,
    /// The best candidate `f_*` (moment condition).
    Best,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum MarginShape {
    /// `G(u) = u^{2κ} / C^{2κ}`.
    Power { kappa: f64, c: f64 },
    /// Piecewise-linear convex `G` through `(u_k, g_k)`, starting at `(0, 0)`.
    Tabulated { u: Vec<f64>, g: Vec<f64> },
    /// `G(u) = slope · u`; convex but not strictly, so it has no usable
    /// conjugate.
    Linear { slope: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginSpec {
    pub shape: MarginShape,
    #[serde(default)]
    pub anchor: DistanceAnchor,
}

impl MarginSpec {
    pub fn power(kappa: f64, c: f64) -> Result<Self> {
        let spec = Self {
            shape: MarginShape::Power { kappa, c },
            anchor: DistanceAnchor::Target,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn tabulated(u: Vec<f64>, g: Vec<f64>) -> Result<Self> {
        let spec = Self {
            shape: MarginShape::Tabulated { u, g },
            anchor: DistanceAnchor::Target,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn linear(slope: f64) -> Result<Self> {
        let spec = Self {
            shape: MarginShape::Linear { slope },
            anchor: DistanceAnchor::Target,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_anchor(mut self, anchor: DistanceAnchor) -> Self {
        self.anchor = anchor;
        self
    }

    /// `(κ, C)` of a power margin.
    pub fn power_params(&self) -> Option<(f64, f64)> {
        match self.shape {
            MarginShape::Power { kappa, c } => Some((kappa, c)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.shape {
            MarginShape::Power { kappa, c } => {
                ensure(*kappa >= 1.0 && kappa.is_finite(), "kappa", "margin exponent must be >= 1")?;
                ensure(*c > 0.0 && c.is_finite(), "C", "margin constant must be positive")?;
            }
            MarginShape::Linear { slope } => {
                ensure(*slope > 0.0 && slope.is_finite(), "slope", "must be positive")?;
            }
            MarginShape::Tabulated { u, g } => {
                ensure(u.len() == g.len(), "g", "grid and values differ in length")?;
                ensure(u.len() >= 2, "u", "need at least two grid points")?;
                ensure(u[0] == 0.0 && g[0] == 0.0, "g", "the table must start at G(0) = 0")?;
                ensure(
                    u.iter().chain(g).all(|x| x.is_finite()),
                    "g",
                    "entries must be finite",
                )?;
                ensure(u.windows(2).all(|w| w[1] > w[0]), "u", "grid must be strictly increasing")?;
                let slopes = chord_slopes(u, g);
                ensure(slopes[0] > 0.0, "g", "G must be strictly increasing")?;
                ensure(
                    slopes.windows(2).all(|w| w[1] > w[0]),
                    "g",
                    "G must be strictly convex",
                )?;
            }
        }
        Ok(())
    }
}

fn chord_slopes(u: &[f64], g: &[f64]) -> Vec<f64> {
    u.windows(2)
        .zip(g.windows(2))
        .map(|(uw, gw)| (gw[1] - gw[0]) / (uw[1] - uw[0]))
        .collect()
}

#[allow(non_snake_case)]
pub fn margin_G(spec: &MarginSpec, u: f64) -> Result<f64> {
    ensure(u >= 0.0, "u", "margin argument must be >= 0")?;
    Ok(match &spec.shape {
        MarginShape::Power { kappa, c } => (u / c).powf(2.0 * kappa),
        MarginShape::Linear { slope } => slope * u,
        MarginShape::Tabulated { u: us, g } => {
            let k = match us.partition_point(|&x| x <= u) {
                0 => 0,
                i => (i - 1).min(us.len() - 2),
            };
            let slope = (g[k + 1] - g[k]) / (us[k + 1] - us[k]);
            g[k] + slope * (u - us[k])
        }
    })
}

/// Convex conjugate `H(v) = sup_{u >= 0} (uv - G(u))`.
///
/// For a table the supremum is attained at a grid point, or is infinite once
/// `v` exceeds the final chord slope.
#[allow(non_snake_case)]
pub fn conjugate_H(spec: &MarginSpec, v: f64) -> Result<f64> {
    ensure(v >= 0.0, "v", "conjugate argument must be >= 0")?;
    match &spec.shape {
        MarginShape::Power { kappa, c } => {
            let q = 2.0 * kappa;
            Ok((q - 1.0) / q * (c.powf(q) / q).powf(1.0 / (q - 1.0)) * v.powf(q / (q - 1.0)))
        }
        MarginShape::Tabulated { u, g } => {
            let last = *chord_slopes(u, g).last().expect("validated table");
            if v > last {
                return Ok(f64::INFINITY);
            }
            Ok(u.iter().zip(g).map(|(u, g)| u * v - g).fold(0.0, f64::max))
        }
        MarginShape::Linear { .. } => Err(Error::invalid(
            "margin",
            "a linear margin is not strictly convex and has no finite conjugate",
        )),
    }
}

/// Inverse `G^{-1}(y)` of an increasing margin function.
pub fn margin_inverse(spec: &MarginSpec, y: f64) -> Result<f64> {
    ensure(y >= 0.0, "y", "must be >= 0")?;
    Ok(match &spec.shape {
        MarginShape::Power { kappa, c } => c * y.powf(1.0 / (2.0 * kappa)),
        MarginShape::Linear { slope } => y / slope,
        MarginShape::Tabulated { u, g } => {
            let k = match g.partition_point(|&x| x <= y) {
                0 => 0,
                i => (i - 1).min(g.len() - 2),
            };
            let slope = (g[k + 1] - g[k]) / (u[k + 1] - u[k]);
            u[k] + (y - g[k]) / slope
        }
    })
}

/// Tsybakov-type noise condition `H_1(v) = v (C_1 v)^{1/γ}`.
///
/// `γ = 0` is the hard-margin case: `H_1(v) = 0` for `v <= C_1` (and `+∞`
/// beyond), where `C_1` is the smallest value of `|1 - 2η|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsybakovSpec {
    pub c1: f64,
    pub gamma: f64,
}

impl TsybakovSpec {
    pub fn new(c1: f64, gamma: f64) -> Result<Self> {
        ensure(gamma >= 0.0 && gamma.is_finite(), "gamma", "must be >= 0")?;
        if gamma > 0.0 {
            ensure(c1 >= 1.0 && c1.is_finite(), "C1", "must be >= 1")?;
        } else {
            ensure(c1 > 0.0 && c1 <= 1.0, "C1", "hard-margin level must lie in (0, 1]")?;
        }
        Ok(Self { c1, gamma })
    }

    pub fn h1(&self, v: f64) -> f64 {
        if self.gamma == 0.0 {
            if v <= self.c1 { 0.0 } else { f64::INFINITY }
        } else {
            v * (self.c1 * v).powf(1.0 / self.gamma)
        }
    }

    /// Margin constant `C_1^{1/(1+γ)} γ^{-γ/(1+γ)} (1+γ)` (`γ > 0`).
    pub fn margin_constant(&self) -> f64 {
        let g = self.gamma;
        self.c1.powf(1.0 / (1.0 + g)) * g.powf(-g / (1.0 + g)) * (1.0 + g)
    }
}

/// The margin function `G_1` implied by a Tsybakov condition: a power margin
/// with `κ = 1 + γ`, or the linear `G_1(u) = C_1 u` when `γ = 0`.
pub fn tsybakov_margin(spec: &TsybakovSpec) -> Result<MarginSpec> {
    if spec.gamma == 0.0 {
        MarginSpec::linear(spec.c1)
    } else {
        MarginSpec::power(1.0 + spec.gamma, spec.margin_constant())
    }
}

/// Densities on a finite support with base-measure weights `μ_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    support: Vec<f64>,
    mu: Vec<f64>,
    names: Vec<String>,
    values: Vec<Vec<f64>>,
}

impl DensityGrid {
    pub fn new(support: Vec<f64>, mu: Vec<f64>) -> Result<Self> {
        if support.len() != mu.len() {
            return Err(Error::Dimension("support and mu differ in length".into()));
        }
        ensure(!support.is_empty(), "support", "must be nonempty")?;
        ensure(mu.iter().all(|m| *m > 0.0 && m.is_finite()), "mu", "weights must be positive")?;
        Ok(Self {
            support,
            mu,
            names: Vec::new(),
            values: Vec::new(),
        })
    }

    /// Stores a density; it must integrate to one within `1e-12`.
    pub fn insert(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if values.len() != self.mu.len() {
            return Err(Error::Dimension(format!(
                "density `{name}` has {} values, support has {}",
                values.len(),
                self.mu.len()
            )));
        }
        ensure(
            values.iter().all(|v| *v >= 0.0 && v.is_finite()),
            "density",
            "values must be finite and nonnegative",
        )?;
        let mass = self.integrate(&values);
        if (mass - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("density", format!("`{name}` integrates to {mass}, not 1")));
        }
        match self.names.iter().position(|n| n == name) {
            Some(i) => self.values[i] = values,
            None => {
                self.names.push(name.to_string());
                self.values.push(values);
            }
        }
        Ok(())
    }

    /// Rescales `values` to integrate to one, then stores them.
    pub fn insert_normalized(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        let mass = self.integrate(&values);
        ensure(mass > 0.0 && mass.is_finite(), "density", "needs positive finite mass")?;
        self.insert(name, values.into_iter().map(|v| v / mass).collect())
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        values.iter().zip(&self.mu).map(|(v, m)| v * m).sum()
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.values[i].as_slice())
            .ok_or_else(|| Error::UnknownDensity(name.to_string()))
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Reads `support, mu, <density>...` columns; density names come from
    /// the header.
    pub fn from_csv(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        ensure(headers.len() >= 3, "csv", "need support, mu and at least one density column")?;
        let mut columns: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
        for record in rdr.records() {
            let record = record?;
            for (col, field) in columns.iter_mut().zip(record.iter()) {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::invalid("csv", format!("`{field}` is not a number")))?;
                col.push(v);
            }
        }
        let mut it = columns.into_iter();
        let support = it.next().unwrap_or_default();
        let mu = it.next().unwrap_or_default();
        let mut grid = DensityGrid::new(support, mu)?;
        for (name, values) in headers.iter().skip(2).zip(it) {
            grid.insert(name, values)?;
        }
        Ok(grid)
    }
}

/// Squared Hellinger distance `½ Σ (√f - √g)² μ`.
pub fn hellinger2(grid: &DensityGrid, f: &str, g: &str) -> Result<f64> {
    let (f, g) = (grid.get(f)?, grid.get(g)?);
    Ok(hellinger2_values(grid.mu(), f, g))
}

pub(crate) fn hellinger2_values(mu: &[f64], f: &[f64], g: &[f64]) -> f64 {
    0.5 * f
        .iter()
        .zip(g)
        .zip(mu)
        .map(|((a, b), m)| (a.sqrt() - b.sqrt()).powi(2) * m)
        .sum::<f64>()
}

/// `P(γ_f - γ_{f_0})` for `γ(a) = -log(a)/2` under `f_0`: half the
/// Kullback-Leibler divergence of `f` from `f_0`.
pub(crate) fn half_kl(mu: &[f64], f0: &[f64], f: &[f64]) -> Result<f64> {
    let mut acc = 0.0;
    for ((a, b), m) in f0.iter().zip(f).zip(mu) {
        if *a > 0.0 {
            if *b <= 0.0 {
                return Err(Error::invalid("density", "candidate vanishes where the target is positive"));
            }
            acc += 0.5 * a * (a / b).ln() * m;
        }
    }
    Ok(acc)
}

/// Standard deviation under `f_0` of `γ_f - γ_g = ½ log(g/f)`.
pub(crate) fn log_ratio_sd(mu: &[f64], f0: &[f64], f: &[f64], g: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = f0
        .iter()
        .zip(f)
        .zip(g)
        .zip(mu)
        .filter(|(((a, _), _), _)| **a > 0.0)
        .map(|(((a, f), g), m)| (a * m, 0.5 * (g / f).ln()))
        .collect();
    let mean: f64 = pts.iter().map(|(w, x)| w * x).sum();
    pts.iter().map(|(w, x)| w * (x - mean).powi(2)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MleReport {
    /// `P(γ_f - γ_{f_0}) - h²(f, f_0)`; nonnegative.
    pub excess_minus_hellinger: f64,
    /// `max_k √(f_0/f_*)` over the support of `f_0`.
    pub max_ratio: f64,
    /// Whether `max_ratio <= C/8`.
    pub ratio_condition: bool,
    /// `σ(γ_{f̄} - γ_{f_*}) - C h(f̄, f_*)` with `f̄ = (f + f_*)/2`.
    pub sd_minus_hellinger: f64,
}

pub fn mle_checks(grid: &DensityGrid, f: &str, f_star: &str, f0: &str, c: f64) -> Result<MleReport> {
    let (fv, sv, tv) = (grid.get(f)?, grid.get(f_star)?, grid.get(f0)?);
    let mu = grid.mu();
    if tv.iter().zip(sv).any(|(a, b)| *a > 0.0 && *b <= 0.0) {
        return Err(Error::invalid("f_star", "best density vanishes where the target is positive"));
    }
    let excess = half_kl(mu, tv, fv)?;
    let max_ratio = tv
        .iter()
        .zip(sv)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| (a / b).sqrt())
        .fold(0.0, f64::max);
    let bar: Vec<f64> = fv.iter().zip(sv).map(|(a, b)| 0.5 * (a + b)).collect();
    let sd = log_ratio_sd(mu, tv, sv, &bar);
    Ok(MleReport {
        excess_minus_hellinger: excess - hellinger2_values(mu, fv, tv),
        max_ratio,
        ratio_condition: max_ratio <= c / 8.0,
        sd_minus_hellinger: sd - c * hellinger2_values(mu, &bar, sv).sqrt(),
    })
}

/// `min_j E_j - G(d_j)` with distances taken from the spec's anchor.
/// Differences within `EXACT_TOL` of the larger side count as zero.
pub fn verify_margin(problem: &ProblemInstance, spec: &MarginSpec) -> Result<f64> {
    spec.validate()?;
    let d = problem.distances(spec.anchor)?;
    let mut worst = f64::INFINITY;
    for (e, d) in problem.risk().excess().iter().zip(&d) {
        let g = margin_G(spec, *d)?;
        let slack = e - g;
        let slack = if slack.abs() <= EXACT_TOL * e.abs().max(g.abs()) { 0.0 } else { slack };
        worst = worst.min(slack);
    }
    Ok(worst)
}

/// `max_{j, 2 <= m <= m_max} P|γ_j^c - γ_*^c|^m / ((m!/2)(2K)^{m-2} d_j²)`.
///
/// `d` defaults to the best-anchored distances `σ(γ_j - γ_*)`, for which
/// the `m = 2` ratio is exactly one.
pub fn verify_exp_moments(
    problem: &ProblemInstance,
    k: f64,
    d: Option<&[f64]>,
    m_max: u32,
) -> Result<f64> {
    ensure(m_max >= 2, "m_max", "must be >= 2")?;
    ensure(k > 0.0, "K", "must be positive")?;
    let owned;
    let d = match d {
        Some(d) => d,
        None => {
            owned = problem.distances(DistanceAnchor::Best)?;
            &owned
        }
    };
    if d.len() != problem.p() {
        return Err(Error::Dimension(format!("{} distances for {} candidates", d.len(), problem.p())));
    }
    let mut worst: f64 = 0.0;
    for m in 2..=m_max {
        let moments = problem.centered_excess_moments(m as f64)?;
        let scale = factorial(m as f64) / 2.0 * (2.0 * k).powi(m as i32 - 2);
        for (mom, dj) in moments.iter().zip(d) {
            let ratio = if *mom == 0.0 {
                0.0
            } else if *dj == 0.0 {
                f64::INFINITY
            } else {
                mom / (scale * dj * dj)
            };
            worst = worst.max(ratio);
        }
    }
    Ok(worst)
}

/// Splits `var(γ_j - γ_0)` into the conditional-noise part and the part
/// explained by the design: `(total, e_part, l_part)`.
pub fn variance_decomposition(problem: &ProblemInstance, j: usize) -> Result<(f64, f64, f64)> {
    ensure(j < problem.p(), "j", "candidate index out of range")?;
    problem.decomposition(j)
}

/// Samples `uv - G(u)` on `u ∈ [0, u_max]` and returns the largest value.
/// Grid oracle for [`conjugate_H`].
#[allow(non_snake_case)]
pub fn grid_conjugate(G: impl Fn(f64) -> f64, v: f64, u_max: f64, steps: usize) -> f64 {
    linspace(0.0, u_max, steps + 1)
        .into_iter()
        .map(|u| u * v - G(u))
        .fold(f64::NEG_INFINITY, f64::max)
}
