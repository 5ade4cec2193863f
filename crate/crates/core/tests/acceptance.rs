//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line before asserting.

use std::time::Instant;

use erm_oracle::bounds::{a_kappa, bound_general_margin_exp, bound_quadratic_exp, evaluate_constants, TailSpec};
use erm_oracle::concentration::checks::{
    bernstein_max, jensen_validity, min_power_sum_optimality, power_expansion, recursive_bound_validity,
    CenteredColumns,
};
use erm_oracle::concentration::{BoundMode, Complexity};
use erm_oracle::experiments::{asymptotic_sweep, problem_diagnostic, verify, ExperimentConfig, Verdict};
use erm_oracle::margins::{conjugate_H, margin_G, tsybakov_margin, MarginSpec, TsybakovSpec};
use erm_oracle::numeric::{linspace, logspace};
use erm_oracle::problems::{estimate_envelope_m, regression_family, Noise, ProblemConfig};
use erm_oracle::rng::derive;

fn report(id: u32, name: &str, pass: bool, started: Instant, detail: &str) {
    println!(
        "criterion {id}: {} {name} ({:.1}s) {detail}",
        if pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    assert!(pass, "criterion {id} failed: {detail}");
}

fn config(text: &str) -> ExperimentConfig {
    serde_json::from_str(text).expect("config parses")
}

fn describe(v: &[Verdict]) -> String {
    v.iter()
        .map(|v| format!("[{}: {:.6} vs {:.6} ±{:.2e}]", v.quantity, v.empirical, v.bound, v.stderr))
        .collect::<Vec<_>>()
        .join(" ")
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE) || a == b
}

#[test]
fn criterion_01_bernstein_moments() {
    let t0 = Instant::now();
    let check = bernstein_max(200, 10, CenteredColumns::Rademacher, &[], &[1.0, 2.0, 3.0], 20_000, &mut derive(101, 0))
        .unwrap();
    let expect = {
        let d = 2.0 * 20f64.ln() / 200.0;
        d.sqrt() + d
    };
    let mut pass = true;
    let mut detail = String::new();
    for (bound, est) in &check.moments {
        pass &= (bound - expect).abs() < 1e-12;
        pass &= est.value <= bound + 3.0 * est.stderr;
        detail += &format!("[m={}: {:.5} ±{:.1e} <= {:.6}] ", est.m, est.value, est.stderr, bound);
    }
    report(1, "Bernstein moment bound", pass, t0, &detail);
}

#[test]
fn criterion_02_bernstein_tails() {
    let t0 = Instant::now();
    let check =
        bernstein_max(200, 10, CenteredColumns::Rademacher, &[0.5, 1.0, 2.0], &[], 20_000, &mut derive(102, 0)).unwrap();
    let mut pass = true;
    let mut detail = String::new();
    for (threshold, prob, est) in &check.tails {
        let se = (prob * (1.0 - prob) / est.reps as f64).sqrt();
        pass &= est.frequency <= prob + 3.0 * se;
        detail += &format!("[x={threshold:.4}: {:.4} <= {:.4}] ", est.frequency, prob);
    }
    report(2, "Bernstein tail bound", pass, t0, &detail);
}

#[test]
fn criterion_03_quadratic_margin_gaussian_regression() {
    let t0 = Instant::now();
    let cfg = config(include_str!("../../../configs/quadratic_gaussian.json"));
    let problem = cfg.problem.build().unwrap();
    let k = match problem.tail_meta().value {
        TailSpec::ExpMoment { k } => k,
        other => panic!("{other:?}"),
    };
    let (_, verdicts) = verify(&cfg, None).unwrap();
    // Independent evaluation of 1 + C√(Δ/E_*) + KΔ/E_* with C² = 4σ².
    let d = 2.0 * 20f64.ln() / 200.0;
    let estar = problem.risk().estar();
    let expect = 1.0 + 2.0 * (d / estar).sqrt() + k * d / estar;
    let main = &verdicts[0];
    let pass = verdicts.iter().all(|v| v.pass)
        && main.branch == "quadratic_exp:main"
        && (main.bound - expect).abs() < 1e-12
        && problem.p() == 10
        && problem.n() == 200;
    report(3, "quadratic margin, Gaussian regression", pass, t0, &format!("K={k:.4} {}", describe(&verdicts)));
}

#[test]
fn criterion_04_lower_bound_construction() {
    let t0 = Instant::now();
    let mut pass = true;
    let mut detail = String::new();
    for (n, text, env_reps) in [
        (64usize, include_str!("../../../configs/lower_bound_64.json"), 2000),
        (4096, include_str!("../../../configs/lower_bound_4096.json"), 50),
    ] {
        let cfg = config(text);
        let problem = cfg.problem.build().unwrap();
        let spike = (n as f64).powf(-2.0 / 3.0);
        let star = problem.risk().star_index();
        pass &= problem.risk().estar() == 0.0 && star == problem.p() - 1;
        pass &= (0..star).all(|j| (problem.risk().get(j) - spike).abs() <= 1e-15);
        // The tail scale derived from the design alone.
        let ProblemConfig::LowerBound { n: _, s } = cfg.problem else { unreachable!() };
        let derived = erm_oracle::problems::make_regression(
            (0..n).map(|i| i as f64).collect(),
            vec![0.0; n],
            (0..=((n as f64).sqrt() as usize))
                .map(|j| (0..n).map(|i| if i == j && j * j < n { (n as f64).powf(1.0 / 6.0) } else { 0.0 }).collect())
                .collect(),
            Noise::DoublePareto { s },
            None,
        )
        .unwrap();
        let derived_m = match derived.tail_meta().value {
            TailSpec::PowerTail { m, .. } => m,
            _ => f64::NAN,
        };
        pass &= (derived_m - 2.0).abs() < 1e-12;
        let fit = estimate_envelope_m(&problem, 3.0, &mut derive(404, n as u64), env_reps).unwrap();
        pass &= fit.m_lower <= 2.0;
        let (_, verdicts) = verify(&cfg, None).unwrap();
        pass &= verdicts.iter().all(|v| v.pass);
        detail += &format!(
            "[n={n}: M={derived_m:.12} fit={:.3} (lower {:.3}) {}] ",
            fit.m,
            fit.m_lower,
            describe(&verdicts)
        );
    }
    report(4, "lower-bound construction", pass, t0, &detail);
}

#[test]
fn criterion_05_small_p_heavy_tails() {
    let t0 = Instant::now();
    let cfg = config(include_str!("../../../configs/small_p_pareto.json"));
    let problem = cfg.problem.build().unwrap();
    let (s, m_scale) = match problem.tail_meta().value {
        TailSpec::PowerTail { s, m } => (s, m),
        other => panic!("{other:?}"),
    };
    let (_, verdicts) = verify(&cfg, None).unwrap();
    // C c_s p^{1/s} M / √n + √E_*, with c_s = 2√(2/π) Γ((s+1)/2)^{1/s} and
    // Γ(5/2) = 3√π/4 at s = 4; C² = 4 var(noise) = 4/6 for parameter 5.
    let c_s = 2.0 * (2.0 / std::f64::consts::PI).sqrt() * (0.75 * std::f64::consts::PI.sqrt()).powf(0.25);
    let c = (4.0f64 / 6.0).sqrt();
    let expect = c * c_s * 3f64.powf(0.25) * m_scale / 400f64.sqrt() + problem.risk().estar().sqrt();
    let pass = s == 4.0
        && problem.p() == 3
        && verdicts.iter().all(|v| v.pass)
        && (verdicts[0].bound - expect).abs() < 1e-12;
    report(5, "small-p bound, heavy tails", pass, t0, &format!("M={m_scale:.4} {}", describe(&verdicts)));
}

#[test]
fn criterion_06_kappa_one_reduction() {
    let t0 = Instant::now();
    let cx = Complexity::new(200.0, 10).unwrap();
    let mut worst: f64 = 0.0;
    let mut branches_agree = true;
    let mut count = 0;
    let cs = logspace(0.1, 10.0, 10);
    let ks: Vec<f64> = std::iter::once(0.0).chain(logspace(0.01, 10.0, 9)).collect();
    let es: Vec<f64> = std::iter::once(0.0).chain(logspace(1e-4, 10.0, 9)).collect();
    for (i, &c) in cs.iter().enumerate() {
        for (j, &k) in ks.iter().enumerate() {
            for (l, &e) in es.iter().enumerate() {
                let mode = match (i + j + l) % 4 {
                    0 => BoundMode::Moment { m: 1.0 },
                    1 => BoundMode::Moment { m: 2.0 },
                    2 => BoundMode::Moment { m: 3.0 },
                    _ => BoundMode::Tail { t: 0.5 + l as f64 },
                };
                let a = bound_quadratic_exp(&cx, c, k, e, mode).unwrap();
                let b = bound_general_margin_exp(&cx, 1.0, c, k, e, mode, None).unwrap();
                worst = worst.max((a.value - b.value).abs() / a.value.abs().max(f64::MIN_POSITIVE));
                branches_agree &= a.branch == b.branch;
                count += 1;
            }
        }
    }
    let pass = count == 1000 && worst <= 1e-12 && branches_agree && a_kappa(1.0) == 1.0;
    report(
        6,
        "kappa = 1 reduction",
        pass,
        t0,
        &format!("{count} points, worst relative gap {worst:.2e}, A(1) = {}", a_kappa(1.0)),
    );
}

#[test]
fn criterion_07_constant_identities() {
    let t0 = Instant::now();
    let mut worst_xi: f64 = 0.0;
    let mut worst_exp: f64 = 0.0;
    for s in linspace(1.2, 8.0, 25) {
        for m in linspace(1.0, 2.0 * s * 0.98, 25) {
            let k = evaluate_constants(1.0, s, m).unwrap();
            let xi = k.xi.unwrap();
            let c = k.c_ms.unwrap();
            let via_c = 2f64.powf(m / (2.0 * s + m)) * c;
            worst_xi = worst_xi.max((xi - via_c).abs() / via_c);
            let w = k.alpha / (k.alpha + k.beta);
            let m_exp = s / m * w;
            let d_exp = k.alpha * k.beta / (k.alpha + k.beta);
            worst_exp = worst_exp
                .max((m_exp - 2.0 * s / (2.0 * s + m)).abs())
                .max((d_exp - (2.0 * s - m) / (2.0 * s + m)).abs());
        }
    }
    let a_max = linspace(1.0, 10.0, 2001).into_iter().map(a_kappa).fold(0.0, f64::max);
    let pass = worst_xi <= 1e-12 && worst_exp <= 1e-12 && a_max < 2.0;
    report(
        7,
        "constant identities",
        pass,
        t0,
        &format!("xi gap {worst_xi:.2e}, exponent gap {worst_exp:.2e}, max A on [1,10] = {a_max:.6}"),
    );
}

/// `sup_{u >= 0} (u v - g(u))` for convex `g`: coarse grid, then golden
/// section on the bracketing cell.
fn legendre(g: impl Fn(f64) -> f64, v: f64, u_max: f64) -> f64 {
    let obj = |u: f64| u * v - g(u);
    let steps = 20_000;
    let h = u_max / steps as f64;
    let best = (0..=steps).max_by(|a, b| obj(*a as f64 * h).total_cmp(&obj(*b as f64 * h))).unwrap();
    let (mut lo, mut hi) = ((best as f64 - 1.0).max(0.0) * h, (best as f64 + 1.0) * h);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let a = hi - phi * (hi - lo);
        let b = lo + phi * (hi - lo);
        if obj(a) < obj(b) {
            lo = a;
        } else {
            hi = b;
        }
    }
    obj(0.5 * (lo + hi)).max(obj(0.0))
}

#[test]
fn criterion_08_conjugate_oracle() {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    for kappa in [1.0, 1.5, 2.0] {
        for c in [1.0, 2.0] {
            let spec = MarginSpec::power(kappa, c).unwrap();
            for v in linspace(0.0, 2.0, 41) {
                // Maximizer of uv - (u/c)^{2κ} is (v c^{2κ} / 2κ)^{1/(2κ-1)} <= 16.
                let grid = legendre(|u| margin_G(&spec, u).unwrap(), v, 40.0);
                worst = worst.max((conjugate_H(&spec, v).unwrap() - grid).abs());
            }
        }
    }
    let ts = TsybakovSpec::new(1.0, 1.0).unwrap();
    let mut worst_ts: f64 = 0.0;
    for u in linspace(0.0, 2.0, 41) {
        let grid = legendre(|v| v * v, u, 10.0);
        worst_ts = worst_ts.max((grid - u * u / 4.0).abs());
        worst_ts = worst_ts.max((legendre(|v| ts.h1(v), u, 10.0) - u * u / 4.0).abs());
    }
    let tsy_ok = tsybakov_margin(&ts).unwrap().power_params() == Some((2.0, 2.0));
    let pass = worst <= 1e-6 && worst_ts <= 1e-6 && tsy_ok;
    report(8, "conjugate oracle", pass, t0, &format!("power gap {worst:.2e}, Tsybakov gap {worst_ts:.2e}"));
}

#[test]
fn criterion_09_likelihood_mixture() {
    let t0 = Instant::now();
    let cfg = config(include_str!("../../../configs/likelihood_grid.json"));
    let ProblemConfig::Density { ref support, .. } = cfg.problem else { panic!() };
    let problem = cfg.problem.build().unwrap();
    let (run, verdicts) = verify(&cfg, None).unwrap();
    let (_, c) = problem.margin_meta().value.power_params().unwrap();
    let d = 2.0 * (2.0 * problem.p() as f64).ln() / problem.n() as f64;
    let kstar = problem.risk().estar();
    let expect = 1.0 + c * (d / kstar).sqrt() + d / kstar;
    let mixture_ok = run.mixture_holds.len() == run.trials.len() && run.mixture_holds.iter().all(|h| *h);
    let pass = support.len() == 16
        && verdicts.iter().all(|v| v.pass)
        && verdicts[0].branch == "mle:main"
        && (verdicts[0].bound - expect).abs() < 1e-12
        && mixture_ok;
    report(9, "likelihood with mixing", pass, t0, &format!("C={c:.4} {}", describe(&verdicts)));
}

#[test]
fn criterion_10_auxiliary_inequalities() {
    let t0 = Instant::now();
    let n = 1_000_000;
    let (first, second) = power_expansion(n, &mut derive(110, 0));
    let min_sum = min_power_sum_optimality(1000, 1000, &mut derive(110, 1)).unwrap();
    let recursive = recursive_bound_validity(n, &mut derive(110, 2)).unwrap();
    let jensen = jensen_validity(n, &mut derive(110, 3)).unwrap();
    let jensen_ok = jensen.iter().all(|(_, lhs, rhs)| *lhs <= rhs + 1e-12 * rhs.abs().max(1.0));
    let pass = first <= 1e-12 && second <= 1e-12 && min_sum <= 1e-12 && recursive <= 1e-10 && jensen_ok;
    let detail = format!(
        "expansion {first:.1e}/{second:.1e}, min power sum {min_sum:.1e}, recursive {recursive:.1e}, jensen {}",
        jensen
            .iter()
            .map(|(name, l, r)| format!("{name} {l:.4}<={r:.4}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    report(10, "auxiliary inequalities", pass, t0, &detail);
}

#[test]
fn criterion_11_asymptotic_trend() {
    let t0 = Instant::now();
    let n = 200;
    let shape: Vec<f64> = (0..10).map(|j| 1.0 + j as f64 / 9.0).collect();
    let noise = Noise::Gaussian { sigma: 1.0 };
    let diagnostic = |mult: f64| {
        let scaled: Vec<f64> = shape.iter().map(|e| e * mult).collect();
        problem_diagnostic(&regression_family(n, &scaled, noise, None).unwrap()).unwrap()
    };
    // Multipliers at which the diagnostic equals each target.
    let multipliers: Vec<f64> = [1.0, 10.0, 100.0]
        .iter()
        .map(|&target| {
            let (mut lo, mut hi) = (1e-6f64, 1e6f64);
            for _ in 0..100 {
                let mid = (lo * hi).sqrt();
                if diagnostic(mid) < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            hi
        })
        .collect();
    let base = ExperimentConfig {
        problem: ProblemConfig::RegressionFamily {
            n,
            excess: shape.clone(),
            noise,
            tail_order: None,
        },
        reps: 10_000,
        seed: 11,
        moments: vec![],
        thresholds: vec![],
        alpha: None,
        bounds: vec![],
        overrides: Default::default(),
        exact_checks: false,
        normalized: false,
    };
    let rows = asymptotic_sweep(&base, &multipliers, 2.0, None).unwrap();
    let mut pass = rows.iter().zip([1.0, 10.0, 100.0]).all(|(r, t)| rel_close(r.diagnostic, t, 1e-6));
    for w in rows.windows(2) {
        let se = (w[0].stderr.powi(2) + w[1].stderr.powi(2)).sqrt();
        pass &= w[1].ratio <= w[0].ratio + 3.0 * se;
    }
    let last = rows.last().unwrap();
    pass &= last.ratio <= 1.1 + 3.0 * last.stderr;
    let detail = rows
        .iter()
        .map(|r| format!("[diag {:.1}: E(hat_e/estar) = {:.5} ±{:.1e}]", r.diagnostic, r.ratio, r.stderr))
        .collect::<Vec<_>>()
        .join(" ");
    report(11, "asymptotic trend", pass, t0, &detail);
}
