//! Acceptance criteria. Runs as a plain binary so every criterion prints its
//! own pass/fail line; exits non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use jumpdrift::coefficients::{
    eval_l, real_fn, verify_square_identity, C1Function, CoefficientSet, TestFunction,
};
use jumpdrift::generator::{
    conjugation_residual, martingale_residual, martingale_statistics, CaglapPathView, Dynamics,
    PathFunctionalH,
};
use jumpdrift::kernels::{moment_bound, JumpKernelSpec, TruncationFunction};
use jumpdrift::pathcalc::{
    chain_rule_qv, grid_epsilon_ladder, qv_regularization, GridPath, PathJump,
};
use jumpdrift::scenarios::{
    counterexample_cauchy, counterexample_stable, martingale_test_functions, registry,
    run_scenario, simulate_scenario, Diagnostic, RunReport, ScenarioSpec, Status,
};
use jumpdrift::simulator::{girsanov_weight, simulate_y, CharacteristicsY, Ensemble, SimConfig};
use jumpdrift::stats::{mean, mean_se, two_sample_z};
use jumpdrift::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn probes(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (1..=n)
        .map(|i| lo + (hi - lo) * i as f64 / (n + 1) as f64)
        .collect()
}

fn scenario(name: &str, diagnostics: &[Diagnostic]) -> Result<RunReport> {
    let mut spec = registry(name)?;
    spec.diagnostics = diagnostics.to_vec();
    run_scenario(&spec, None)
}

fn statistic(report: &RunReport, name: &str) -> f64 {
    report
        .diagnostic(name)
        .map(|d| d.statistic)
        .unwrap_or(f64::INFINITY)
}

fn with_paths(name: &str, n_paths: usize) -> Result<ScenarioSpec> {
    Ok(registry(name)?.with_overrides(None, Some(n_paths), None))
}

fn transform_identities() -> Result<Outcome> {
    let dynamics = registry("weierstrass_drift")?.dynamics()?;
    let h = &dynamics.coeffs.h;
    let node_gap = h
        .sigma_values()
        .iter()
        .zip(h.hprime_values())
        .map(|(s, hp)| (hp - (-s).exp()).abs())
        .fold(0.0, f64::max);
    let (ylo, yhi) = h.y_range();
    let mut round_trip = 0.0f64;
    for y in probes(ylo, yhi, 1000) {
        round_trip = round_trip.max((h.h(h.inverse(y)?)? - y).abs());
    }
    let (xlo, xhi) = h.x_range();
    let id = TestFunction::identity();
    let mut l_identity = 0.0f64;
    for x in probes(xlo, xhi, 1000) {
        l_identity = l_identity.max(eval_l(&id, h, &dynamics.coeffs.diffusion, x)?.abs());
    }
    Ok(Outcome::new(
        node_gap == 0.0 && round_trip < 1e-6 && l_identity == 0.0,
        format!("node gap {node_gap:e}, round trip {round_trip:.2e}, max |L id| {l_identity:e}"),
    ))
}

fn square_identity() -> Result<Outcome> {
    let dynamics = registry("weierstrass_drift")?.dynamics()?;
    let h = &dynamics.coeffs.h;
    let (lo, hi) = h.x_range();
    let points = probes(lo, hi, 200);
    let fixtures = [
        TestFunction::identity(),
        TestFunction::sin(),
        TestFunction::tanh(),
        TestFunction::arctan(),
        TestFunction::soft_square(2.0),
    ];
    let mut worst = 0.0f64;
    for f in &fixtures {
        worst = worst.max(verify_square_identity(
            f,
            h,
            &dynamics.coeffs.diffusion,
            &points,
        )?);
    }
    Ok(Outcome::new(
        worst < 1e-6,
        format!("worst residual over 5 fixtures {worst:.2e}"),
    ))
}

fn conjugation() -> Result<Outcome> {
    let fixtures = [
        TestFunction::identity(),
        TestFunction::sin(),
        TestFunction::tanh(),
        TestFunction::arctan(),
        TestFunction::soft_square(2.0),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut parts = Vec::new();
    let mut pass = true;
    for name in ["atom_jump", "weierstrass_drift"] {
        let spec = with_paths(name, 200)?;
        let (dynamics, ensemble) = simulate_scenario(&spec)?;
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let p = &ensemble.paths[rng.random_range(0..ensemble.paths.len())];
            let i = rng.random_range(1..p.x.len());
            let f = &fixtures[rng.random_range(0..fixtures.len())];
            let view = CaglapPathView::new(&ensemble.times, &p.x)?;
            worst = worst.max(conjugation_residual(
                f,
                &spec.functional,
                &dynamics,
                &view,
                i,
            )?);
        }
        pass &= worst < 1e-6;
        parts.push(format!("{name} {worst:.2e}"));
    }
    Ok(Outcome::new(pass, parts.join(", ")))
}

/// `∫_0^1 x^{-1/2} dx` over `x = s²`, which is also `∫_1^∞ x^{-3/2} dx`
/// over `x = 1/s²`.
fn inverse_sqrt_integral() -> f64 {
    quadrature::double_exponential::integrate(
        |s: f64| 2.0 * s * (s * s).powf(-0.5),
        0.0,
        1.0,
        1e-12,
    )
    .integral
}

fn kernel_moment() -> Result<Outcome> {
    let kernel = JumpKernelSpec::stable(0.5, 1.0, 0.0);
    let ys = probes(-4.0, 4.0, 11);
    let report = moment_bound(&kernel, &TruncationFunction::default(), &ys)?;
    // Both sides of ∫ (1 ∧ |x|) |x|^{-3/2} dx.
    let oracle = 2.0 * (inverse_sqrt_integral() + inverse_sqrt_integral());
    let moments: Vec<f64> = report.rows.iter().map(|r| r.moment).collect();
    let spread = moments.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - moments.iter().cloned().fold(f64::INFINITY, f64::min);
    let err = (report.bound - oracle).abs();
    Ok(Outcome::new(
        err < 1e-6 && (oracle - 8.0).abs() < 1e-6 && spread < 1e-12,
        format!(
            "bound {:.9} vs oracle {oracle:.9}, y spread {spread:e}",
            report.bound
        ),
    ))
}

fn brownian_ensemble(n_paths: usize, n_steps: usize, seed: u64) -> Result<Ensemble> {
    let dynamics = Dynamics {
        coeffs: CoefficientSet::brownian(1.0, 8.0),
        kernel: JumpKernelSpec::empty(),
        truncation: TruncationFunction::default(),
    };
    let config = SimConfig {
        n_paths,
        n_steps,
        master_seed: seed,
        ..SimConfig::default()
    };
    let chars = CharacteristicsY::from_dynamics(&dynamics, &config)?;
    simulate_y(&chars, &PathFunctionalH::Zero, &config)
}

fn qv_estimator() -> Result<Outcome> {
    let n_steps = 1 << 14;
    let ensemble = brownian_ensemble(100, n_steps, 5)?;
    let dt = ensemble.dt();
    let eps = grid_epsilon_ladder(1.0, n_steps);
    let finest = eps[eps.len() - 1];
    let values = ensemble
        .paths
        .iter()
        .map(|p| qv_regularization(&GridPath::from_sample(p, dt), finest, 1.0))
        .collect::<Result<Vec<_>>>()?;
    let brownian = mean(&values);
    // One unit jump at t = 1/2 on a 100-step grid.
    let mut step_values = vec![0.0; 101];
    step_values[51..].fill(1.0);
    let step = qv_regularization(&GridPath::new(0.01, step_values)?, 0.1, 1.0)?;
    Ok(Outcome::new(
        (brownian - 1.0).abs() < 0.05 && step == 1.0,
        format!("Brownian [X,X]_1 at ε={finest:.2e}: {brownian:.4}, step path {step}"),
    ))
}

fn chain_rule() -> Result<Outcome> {
    let phis = [
        C1Function::identity(),
        C1Function {
            value: real_fn(f64::sin),
            derivative: real_fn(f64::cos),
        },
        C1Function {
            value: real_fn(|x| x * x * x),
            derivative: real_fn(|x| 3.0 * x * x),
        },
    ];
    let n = 1000;
    let dt = 1.0 / n as f64;
    let eps = grid_epsilon_ladder(1.0, n);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut exact_gap = 0.0f64;
    for _ in 0..20 {
        // Jumps further apart than the coarsest ε.
        let mut values = vec![rng.random_range(-1.0..1.0)];
        let mut jumps = Vec::new();
        for i in 0..n {
            let mut x = values[i];
            if i % 250 == 149 {
                let size = rng.random_range(-2.0..2.0);
                jumps.push(PathJump {
                    step: i,
                    x_before: x,
                    size,
                });
                x += size;
            }
            values.push(x);
        }
        let path = GridPath::new(dt, values)?.with_jumps(jumps);
        for phi in &phis {
            let r = chain_rule_qv(phi, &path, &eps, 1.0)?;
            for e in &r.estimated {
                exact_gap = exact_gap.max((e - r.predicted).abs());
            }
        }
    }

    let dynamics = Dynamics {
        coeffs: CoefficientSet::brownian(1.0, 12.0),
        kernel: JumpKernelSpec::atoms(1.0, vec![(0.6, 0.5), (-0.4, 0.5)]),
        truncation: TruncationFunction::default(),
    };
    let config = SimConfig {
        n_paths: 100,
        n_steps: 4000,
        master_seed: 9,
        ..SimConfig::default()
    };
    let chars = CharacteristicsY::from_dynamics(&dynamics, &config)?;
    let ensemble = simulate_y(&chars, &PathFunctionalH::Zero, &config)?;
    let eps = grid_epsilon_ladder(1.0, config.n_steps);
    let (mut predicted, mut estimated) = (Vec::new(), Vec::new());
    for p in &ensemble.paths {
        let r = chain_rule_qv(
            &phis[1],
            &GridPath::from_sample(p, ensemble.dt()),
            &eps,
            1.0,
        )?;
        predicted.push(r.predicted);
        estimated.push(r.finest());
    }
    let (p, e) = (mean(&predicted), mean(&estimated));
    let rel = (e - p).abs() / p;
    Ok(Outcome::new(
        exact_gap < 1e-9 && rel <= 0.05,
        format!("step paths max gap {exact_gap:.2e}, Brownian plus jumps relative gap {rel:.4}"),
    ))
}

fn martingale() -> Result<Outcome> {
    let mut parts = Vec::new();
    let mut pass = true;
    for name in ["brownian_baseline", "atom_jump"] {
        let spec = registry(name)?;
        let (dynamics, ensemble) = simulate_scenario(&spec)?;
        let mid = spec.sim.n_steps / 2;
        let x_mid: Vec<f64> = ensemble.paths.iter().map(|p| p.x[mid]).collect();
        let mut worst = 0.0f64;
        for f in martingale_test_functions() {
            let residuals = ensemble
                .paths
                .iter()
                .map(|p| {
                    martingale_residual(&ensemble.times, &p.x, &f, &spec.functional, &dynamics)
                })
                .collect::<Result<Vec<_>>>()?;
            worst = worst.max(martingale_statistics(&f.name, &residuals, &x_mid, mid).max_z());
        }
        pass &= worst < 3.0;
        parts.push(format!(
            "{name} ({} paths) max z {worst:.2}",
            ensemble.paths.len()
        ));
    }
    Ok(Outcome::new(pass, parts.join(", ")))
}

fn compensator() -> Result<Outcome> {
    let mut parts = Vec::new();
    let mut pass = true;
    for name in ["atom_jump", "stable_jump"] {
        let report = scenario(name, &[Diagnostic::Compensator])?;
        let z = statistic(&report, "compensator");
        pass &= z < 3.0;
        parts.push(format!("{name} z {z:.2}"));
    }
    Ok(Outcome::new(pass, parts.join(", ")))
}

fn girsanov() -> Result<Outcome> {
    let base = registry("brownian_baseline")?;
    let (_, ensemble) = simulate_scenario(&base)?;
    let kappa = |functional: &PathFunctionalH, e: &Ensemble| -> Vec<f64> {
        e.paths
            .iter()
            .map(|p| girsanov_weight(p, functional, e.dt()).kappa_terminal)
            .collect()
    };
    let zero_exact = kappa(&PathFunctionalH::Zero, &ensemble)
        .iter()
        .all(|&k| k == 1.0);

    let c = 0.5;
    let constant = PathFunctionalH::Constant { value: c };
    let k_const = kappa(&constant, &ensemble);
    let z_const = mean_se(&k_const).z_score(1.0);

    let sup_spec = registry("path_dependent_drift")?;
    let (_, sup_ensemble) = simulate_scenario(&sup_spec)?;
    let z_sup = mean_se(&kappa(&sup_spec.functional, &sup_ensemble)).z_score(1.0);

    let reweighted: Vec<f64> = ensemble
        .paths
        .iter()
        .zip(&k_const)
        .map(|(p, k)| k * p.x_terminal())
        .collect();
    let mut drifted = base
        .clone()
        .with_overrides(Some(base.sim.master_seed + 1), None, None);
    drifted.functional = constant;
    let (_, direct) = simulate_scenario(&drifted)?;
    let z_drift = two_sample_z(mean_se(&reweighted), mean_se(&direct.terminal_values()));

    Ok(Outcome::new(
        zero_exact && z_const < 3.0 && z_sup < 3.0 && z_drift < 3.0,
        format!(
            "κ≡1 for H=0: {zero_exact}; E[κ] z: constant {z_const:.2}, running sup {z_sup:.2}; reweighted vs drifted z {z_drift:.2}"
        ),
    ))
}

fn smooth_drift_crosscheck() -> Result<Outcome> {
    let report = scenario("smooth_drift_crosscheck", &[Diagnostic::Crosscheck])?;
    let d = report
        .diagnostic("crosscheck")
        .expect("crosscheck was requested");
    let z_mean = d.details["z_mean"].as_f64().unwrap_or(f64::INFINITY);
    let z_var = d.details["z_variance"].as_f64().unwrap_or(f64::INFINITY);
    Ok(Outcome::new(
        z_mean < 3.0 && z_var < 3.0,
        format!("mean z {z_mean:.2}, variance z {z_var:.2}"),
    ))
}

fn cap_means(report: &RunReport) -> Vec<(f64, f64)> {
    report.diagnostics[0].details["caps"]
        .as_array()
        .map(|rows| {
            rows.iter()
                .map(|r| {
                    (
                        r["cap"].as_f64().unwrap_or(f64::NAN),
                        r["mean"].as_f64().unwrap_or(f64::NAN),
                    )
                })
                .collect()
        })
        .unwrap_or_default()
}

fn verdict_name(report: &RunReport) -> String {
    serde_json::to_value(report.verdict)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_else(|| "none".into())
}

fn counterexample_stable_dichotomy() -> Result<Outcome> {
    let base = registry("counterexample_stable")?.sim;
    let t = base.horizon;
    let low = counterexample_stable(
        0.5,
        0.5,
        &[10.0, 100.0],
        &SimConfig {
            n_paths: 10_000,
            ..base.clone()
        },
    )?;
    let mut low_err = 0.0f64;
    for (m, v) in cap_means(&low) {
        let oracle = 2.0 * (m.sqrt() - 1.0) * t;
        low_err = low_err.max((v - oracle).abs() / oracle);
    }
    let low_verdict = verdict_name(&low);

    let high = counterexample_stable(
        1.5,
        0.5,
        &[10.0, 100.0, 1000.0],
        &SimConfig {
            n_paths: 40_000,
            ..base
        },
    )?;
    // Two tails of 0.5 |x| |x|^{-5/2} beyond 1.
    let limit = 2.0 * 0.5 * t * inverse_sqrt_integral();
    let top = cap_means(&high).last().map_or(f64::NAN, |r| r.1);
    let high_err = (top - limit).abs() / limit;
    let high_verdict = verdict_name(&high);

    Ok(Outcome::new(
        low_err < 0.10
            && low_verdict == "inconsistent"
            && high_err < 0.10
            && high_verdict == "consistent_with_dirichlet",
        format!(
            "γ=0.5 worst relative error {low_err:.3}, {low_verdict}; γ=1.5 M=1000 mean {top:.3} vs {limit:.3}, {high_verdict}"
        ),
    ))
}

fn counterexample_cauchy_growth() -> Result<Outcome> {
    let report = counterexample_cauchy(1_000_000, &[10.0, 100.0, 1000.0], 0)?;
    let rows = cap_means(&report);
    let at_100 = rows
        .iter()
        .find(|(m, _)| *m == 100.0)
        .map_or(f64::NAN, |r| r.1);
    let oracle = (1.0f64 + 1e4).ln() / std::f64::consts::PI;
    let rel = (at_100 - oracle).abs() / oracle;
    let increasing = rows.windows(2).all(|w| w[1].1 > w[0].1);
    Ok(Outcome::new(
        rel < 0.05 && increasing,
        format!(
            "M=100 mean {at_100:.4} vs {oracle:.4} ({rel:.4}), strictly increasing: {increasing}"
        ),
    ))
}

fn gamma_residual() -> Result<Outcome> {
    let report = scenario("brownian_baseline", &[Diagnostic::GammaQv])?;
    let d = report
        .diagnostic("gamma_qv")
        .expect("gamma_qv was requested");
    let values: Vec<f64> = d.details["estimate"]["values"]
        .as_array()
        .map(|v| v.iter().filter_map(|x| x.as_f64()).collect())
        .unwrap_or_default();
    let monotone = !values.is_empty() && values.windows(2).all(|w| w[1] <= w[0]);
    let finest = values.last().copied().unwrap_or(f64::INFINITY);
    Ok(Outcome::new(
        monotone && finest < 0.05 && d.status == Status::Pass,
        format!("ladder {values:.4?}, monotone {monotone}"),
    ))
}

type Criterion = (&'static str, fn() -> Result<Outcome>);

const CRITERIA: [Criterion; 13] = [
    ("transform identities", transform_identities),
    ("square identity", square_identity),
    ("conjugation", conjugation),
    ("kernel moment", kernel_moment),
    ("QV estimator", qv_estimator),
    ("chain rule", chain_rule),
    ("martingale residuals", martingale),
    ("compensator residual", compensator),
    ("Girsanov", girsanov),
    ("smooth-drift cross-validation", smooth_drift_crosscheck),
    ("stable counterexample", counterexample_stable_dichotomy),
    ("Cauchy counterexample", counterexample_cauchy_growth),
    ("Γ residual", gamma_residual),
];

fn main() -> ExitCode {
    // `cargo test -- --list` and filters are not meaningful here.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut failed = 0;
    for (i, (name, run)) in CRITERIA.iter().enumerate() {
        let started = Instant::now();
        let (pass, detail) = match run() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {:>2} {name}: {} ({detail}; {:.1}s)",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64()
        );
    }
    println!(
        "{} of {} criteria passed",
        CRITERIA.len() - failed,
        CRITERIA.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
