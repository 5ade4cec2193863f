//! Loss tables, the ERM selector, excess-risk bookkeeping and the moment /
//! tail estimators used by every experiment.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numeric::CompensatedSum;

/// Losses of `p` candidates (and optionally the target) on `n` test points.
///
/// Stored row-major: `loss[i * p + j]` is candidate `j` at point `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTable {
    n: usize,
    p: usize,
    loss: Vec<f64>,
    target: Option<Vec<f64>>,
}

impl LossTable {
    pub fn new(n: usize, p: usize, loss: Vec<f64>) -> Result<Self> {
        ensure(n >= 1, "n", "at least one test point is required")?;
        ensure(p >= 1, "p", "at least one candidate is required")?;
        if loss.len() != n * p {
            return Err(Error::Dimension(format!(
                "loss table has {} entries, expected n*p = {}",
                loss.len(),
                n * p
            )));
        }
        ensure(loss.iter().all(|x| x.is_finite()), "loss", "entries must be finite")?;
        Ok(Self {
            n,
            p,
            loss,
            target: None,
        })
    }

    /// Builds a table from one row per test point.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::Dimension("ragged loss rows".into()));
        }
        Self::new(n, p, rows.concat())
    }

    pub fn with_target(mut self, target: Vec<f64>) -> Result<Self> {
        if target.len() != self.n {
            return Err(Error::Dimension(format!(
                "target column has {} entries, expected {}",
                target.len(),
                self.n
            )));
        }
        ensure(target.iter().all(|x| x.is_finite()), "loss0", "entries must be finite")?;
        self.target = Some(target);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.loss[i * self.p + j]
    }

    pub fn target(&self) -> Option<&[f64]> {
        self.target.as_deref()
    }

    /// Empirical mean of column `j`, summed in row order.
    pub fn column_mean(&self, j: usize) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.n {
            acc += self.loss[i * self.p + j];
        }
        acc / self.n as f64
    }

    /// Adds `c` to every candidate and target entry.
    pub fn shifted(&self, c: f64) -> Result<Self> {
        let mut out = Self::new(self.n, self.p, self.loss.iter().map(|x| x + c).collect())?;
        if let Some(t) = &self.target {
            out = out.with_target(t.iter().map(|x| x + c).collect())?;
        }
        Ok(out)
    }
}

/// Empirical risk `P_n γ_j` of every candidate.
pub fn empirical_risks(table: &LossTable) -> Vec<f64> {
    (0..table.p()).map(|j| table.column_mean(j)).collect()
}

/// Index minimizing the empirical risk; the smallest index wins ties.
pub fn select_erm(table: &LossTable) -> usize {
    argmin(&empirical_risks(table))
}

pub(crate) fn argmin(xs: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in xs.iter().enumerate().skip(1) {
        if x < xs[best] {
            best = j;
        }
    }
    best
}

/// Exact population excess risks of the candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskProfile {
    excess: Vec<f64>,
    estar: f64,
    star_index: usize,
}

impl RiskProfile {
    pub fn new(excess: Vec<f64>) -> Result<Self> {
        ensure(!excess.is_empty(), "excess", "at least one candidate is required")?;
        // Exact sums can land a hair below zero for candidates equal to the target.
        ensure(
            excess.iter().all(|e| e.is_finite() && *e >= -1e-12),
            "excess",
            "excess risks must be finite and nonnegative",
        )?;
        let excess: Vec<f64> = excess.into_iter().map(|e| e.max(0.0)).collect();
        let star_index = argmin(&excess);
        Ok(Self {
            estar: excess[star_index],
            excess,
            star_index,
        })
    }

    pub fn excess(&self) -> &[f64] {
        &self.excess
    }

    pub fn get(&self, j: usize) -> f64 {
        self.excess[j]
    }

    pub fn estar(&self) -> f64 {
        self.estar
    }

    pub fn star_index(&self) -> usize {
        self.star_index
    }

    pub fn len(&self) -> usize {
        self.excess.len()
    }

    pub fn is_empty(&self) -> bool {
        self.excess.is_empty()
    }
}

/// Where a replication's randomness came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub stream: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub selected: usize,
    pub hat_e: f64,
    /// Excess risk of the mixture `α f̂ + (1-α) f_*`, convex problems only.
    pub hat_e_alpha: Option<f64>,
    pub seed: SeedRecord,
}

/// Monte Carlo estimate of the `L_m` norm `(E X^m)^{1/m}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub m: f64,
    /// Margin exponent κ of the transform `Ê^{1/2κ}` the samples came from.
    pub kappa: f64,
    pub value: f64,
    pub stderr: f64,
    pub reps: usize,
}

/// `(mean x^m)^{1/m}` with a delta-method standard error.
///
/// The error is `sd(x^m) / (√reps · m · value^{m-1})`; it is reported as
/// `+∞` when the norm is zero and `m > 1`, and when only one sample exists.
pub fn moment_norm(samples: &[f64], m: f64) -> Result<MomentEstimate> {
    if samples.is_empty() {
        return Err(Error::NoSamples);
    }
    ensure(m >= 1.0 && m.is_finite(), "m", "moment order must be >= 1")?;
    ensure(
        samples.iter().all(|x| *x >= 0.0 && x.is_finite()),
        "samples",
        "samples must be finite and nonnegative",
    )?;
    let reps = samples.len();
    let powered: Vec<f64> = samples.iter().map(|x| x.powf(m)).collect();
    let mean = powered.iter().copied().collect::<CompensatedSum>().value() / reps as f64;
    let value = mean.powf(1.0 / m);
    let stderr = if reps < 2 || (value == 0.0 && m > 1.0) {
        f64::INFINITY
    } else {
        let ss = powered
            .iter()
            .map(|y| (y - mean) * (y - mean))
            .collect::<CompensatedSum>()
            .value();
        let sd = (ss / (reps - 1) as f64).sqrt();
        sd / ((reps as f64).sqrt() * m * value.powf(m - 1.0))
    };
    Ok(MomentEstimate {
        m,
        kappa: 1.0,
        value,
        stderr,
        reps,
    })
}

/// Fraction of samples at or above a threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailEstimate {
    pub threshold: f64,
    pub frequency: f64,
    pub stderr: f64,
    pub reps: usize,
}

pub fn tail_frequency(samples: &[f64], threshold: f64) -> Result<TailEstimate> {
    if samples.is_empty() {
        return Err(Error::NoSamples);
    }
    let reps = samples.len();
    let hits = samples.iter().filter(|&&x| x >= threshold).count();
    let frequency = hits as f64 / reps as f64;
    Ok(TailEstimate {
        threshold,
        frequency,
        stderr: (frequency * (1.0 - frequency) / reps as f64).sqrt(),
        reps,
    })
}
