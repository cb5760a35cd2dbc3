//! Scenario registry, TOML ingestion, orchestration and report emission.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Cauchy;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::coefficients::{
    check_hypotheses, eval_l, real_fn, symmetric_grid, verify_square_identity, C1Function,
    CoefficientSet, DiffusionSpec, DriftSpec, MollifierConfig, SigmaFunction, TestFunction,
};
use crate::error::{LabError, Result};
use crate::generator::{
    conjugation_residual, martingale_residual, martingale_statistics, CaglapPathView, Dynamics,
    PathFunctionalH,
};
use crate::kernels::{moment_bound, JumpKernelSpec, JumpLaw, Region, TruncationFunction};
use crate::pathcalc::{
    chain_rule_qv, dirichlet_condition_int_y, dirichlet_report, gamma_residual_qv,
    grid_epsilon_ladder, nu_jump_structural_check, qv_ladder, DirichletVerdict, GridPath,
    QVEstimate, DIVERGENCE_GROWTH,
};
use crate::simulator::{
    canonical_decomposition_residual, compensator_residual, girsanov_weight, simulate_direct_euler,
    simulate_y, CharacteristicsY, Ensemble, EnsembleSummary, SimConfig,
};
use crate::stats::{mean, mean_se, two_sample_z, variance_se, MeanSe};

pub const REPORT_SCHEMA: &str = "jumpdrift.report/1";

/// Environment variable holding the default output directory.
pub const OUT_DIR_ENV: &str = "JUMPDRIFT_OUT";

/// At most this many paths go to the paths CSV of a scenario run.
pub const PATHS_CSV_LIMIT: usize = 100;

/// Paths used by the pathwise quadratic-variation diagnostics.
pub const QV_PATHS: usize = 100;

/// Noise band for the Γ quadratic variation over [`QV_PATHS`] paths.
pub const GAMMA_NOISE_BAND: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftDecl {
    Zero,
    Linear {
        slope: f64,
    },
    /// `slope * clamp(x, lo, hi)`; the direct Euler route uses the
    /// a.e. derivative `slope * 1_{lo < x < hi}`.
    ClampedLinear {
        slope: f64,
        lo: f64,
        hi: f64,
    },
    Weierstrass {
        amplitude: f64,
        terms: usize,
    },
}

impl DriftDecl {
    fn build(&self) -> DriftSpec {
        match *self {
            DriftDecl::Zero => DriftSpec::zero(),
            DriftDecl::Linear { slope } => DriftSpec::linear(slope),
            DriftDecl::ClampedLinear { slope, lo, hi } => {
                let base = DriftSpec::clamped_linear(slope, lo, hi);
                DriftSpec::custom(
                    base.name,
                    base.beta,
                    Some(real_fn(move |x| if x > lo && x < hi { slope } else { 0.0 })),
                )
            }
            DriftDecl::Weierstrass { amplitude, terms } => DriftSpec::weierstrass(amplitude, terms),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiffusionDecl {
    Constant {
        value: f64,
    },
    /// `base + amplitude * sin(x)`
    Sinusoidal {
        base: f64,
        amplitude: f64,
    },
}

impl DiffusionDecl {
    fn build(&self) -> Result<DiffusionSpec> {
        match *self {
            DiffusionDecl::Constant { value } => Ok(DiffusionSpec::constant(value)),
            DiffusionDecl::Sinusoidal { base, amplitude } => {
                if !(base > amplitude.abs()) {
                    return Err(LabError::validation(
                        "sinusoidal diffusion needs base > |amplitude|",
                    ));
                }
                Ok(DiffusionSpec::custom(
                    format!("sinusoidal({base},{amplitude})"),
                    real_fn(move |x| base + amplitude * x.sin()),
                    base - amplitude.abs(),
                    base + amplitude.abs(),
                ))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientDecl {
    pub drift: DriftDecl,
    pub diffusion: DiffusionDecl,
    pub half_width: f64,
    pub cells_per_side: usize,
    #[serde(default)]
    pub mollifier: MollifierConfig,
    /// Upper end of the `∫ exp(-Σ)` divergence ladder; the grid half-width
    /// if unset.
    #[serde(default)]
    pub truncation_range: Option<f64>,
}

impl Default for CoefficientDecl {
    fn default() -> Self {
        Self {
            drift: DriftDecl::Zero,
            diffusion: DiffusionDecl::Constant { value: 1.0 },
            half_width: 8.0,
            cells_per_side: 400,
            mollifier: MollifierConfig::default(),
            truncation_range: None,
        }
    }
}

impl CoefficientDecl {
    pub fn build(&self) -> Result<CoefficientSet> {
        if !(self.half_width > 0.0) || self.cells_per_side == 0 {
            return Err(LabError::validation(
                "coefficient grid needs half_width > 0 and cells_per_side > 0",
            ));
        }
        let drift = self.drift.build();
        let diffusion = self.diffusion.build()?;
        let grid = symmetric_grid(self.half_width, self.cells_per_side);
        let mids: Vec<f64> = grid.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        drift.validate(&mids, 1e-6)?;
        if self.drift == DriftDecl::Zero {
            CoefficientSet::from_sigma(drift, diffusion, SigmaFunction::zero(grid)?)
        } else {
            CoefficientSet::build(drift, diffusion, &self.mollifier, &grid)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelDecl {
    #[default]
    Empty,
    Stable {
        gamma: f64,
        scale: f64,
        #[serde(default)]
        alpha: f64,
    },
    /// State-independent rate with jumps at fixed positions.
    Atoms {
        rate: f64,
        atoms: Vec<(f64, f64)>,
        #[serde(default)]
        alpha: f64,
    },
    Normal {
        rate: f64,
        mean: f64,
        std_dev: f64,
        #[serde(default)]
        alpha: f64,
    },
}


impl KernelDecl {
    pub fn build(&self) -> Result<JumpKernelSpec> {
        let k = match self {
            KernelDecl::Empty => JumpKernelSpec::empty(),
            KernelDecl::Stable {
                gamma,
                scale,
                alpha,
            } => JumpKernelSpec::stable(*gamma, *scale, *alpha),
            KernelDecl::Atoms { rate, atoms, alpha } => {
                JumpKernelSpec::atoms(*rate, atoms.clone()).with_alpha(*alpha)
            }
            KernelDecl::Normal {
                rate,
                mean,
                std_dev,
                alpha,
            } => {
                let r = *rate;
                JumpKernelSpec::finite_activity(
                    "normal",
                    real_fn(move |_| r),
                    r,
                    JumpLaw::Normal {
                        mean: *mean,
                        std_dev: *std_dev,
                    },
                )
                .with_alpha(*alpha)
            }
        };
        k.validate()?;
        Ok(k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Diagnostic {
    TransformIdentities,
    SquareIdentity,
    KernelMoment,
    Conjugation,
    Martingale,
    Compensator,
    Girsanov,
    Crosscheck,
    Qv,
    ChainRule,
    GammaQv,
    Dirichlet,
    Decomposition,
}

impl Diagnostic {
    fn needs_simulation(self) -> bool {
        !matches!(
            self,
            Diagnostic::TransformIdentities | Diagnostic::SquareIdentity | Diagnostic::KernelMoment
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CounterexampleDecl {
    /// `X = W + S` with `S` pure-jump stable.
    Stable {
        gamma: f64,
        scale: f64,
        caps: Vec<f64>,
    },
    /// Two-step martingale jumping to `sign(Z) sqrt|Z|`, `Z` Cauchy.
    Cauchy { n_samples: usize, caps: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    #[serde(default)]
    pub coefficients: CoefficientDecl,
    #[serde(default)]
    pub kernel: KernelDecl,
    #[serde(default)]
    pub truncation: TruncationFunction,
    #[serde(default = "zero_functional")]
    pub functional: PathFunctionalH,
    pub sim: SimConfig,
    #[serde(default)]
    pub diagnostics: Vec<Diagnostic>,
    #[serde(default)]
    pub counterexample: Option<CounterexampleDecl>,
}

fn zero_functional() -> PathFunctionalH {
    PathFunctionalH::Zero
}

impl ScenarioSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text)
            .map_err(|e| LabError::validation(format!("scenario config: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LabError::Serialization(e.to_string()))
    }

    /// Structural checks that need no numerics.
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(LabError::validation("scenario name must be non-empty"));
        }
        self.functional.validate()?;
        self.truncation.validate()?;
        self.sim.validate(&self.truncation)?;
        let mut seen = Vec::new();
        for d in &self.diagnostics {
            if seen.contains(d) {
                return Err(LabError::validation(format!(
                    "diagnostic {d:?} requested twice"
                )));
            }
            seen.push(*d);
        }
        match &self.counterexample {
            Some(CounterexampleDecl::Stable { gamma, scale, caps }) => {
                if !(*gamma > 0.0 && *gamma < 2.0) || !(*scale > 0.0) {
                    return Err(LabError::validation(
                        "stable counterexample needs gamma in (0,2) and scale > 0",
                    ));
                }
                check_caps(caps, 1.0)?;
            }
            Some(CounterexampleDecl::Cauchy { n_samples, caps }) => {
                if *n_samples < 10_000 {
                    return Err(LabError::validation(
                        "Cauchy counterexample needs at least 10^4 samples",
                    ));
                }
                check_caps(caps, 0.0)?;
            }
            None => {}
        }
        Ok(())
    }

    pub fn with_overrides(
        mut self,
        seed: Option<u64>,
        paths: Option<usize>,
        steps: Option<usize>,
    ) -> Self {
        if let Some(s) = seed {
            self.sim.master_seed = s;
        }
        if let Some(p) = paths {
            self.sim.n_paths = p;
            if let Some(CounterexampleDecl::Cauchy { n_samples, .. }) = &mut self.counterexample {
                *n_samples = p;
            }
        }
        if let Some(n) = steps {
            self.sim.n_steps = n;
        }
        self
    }

    pub fn dynamics(&self) -> Result<Dynamics> {
        Ok(Dynamics {
            coeffs: self.coefficients.build()?,
            kernel: self.kernel.build()?,
            truncation: self.truncation,
        })
    }
}

fn check_caps(caps: &[f64], above: f64) -> Result<()> {
    if caps.is_empty()
        || caps.iter().any(|c| !(*c > above))
        || caps.windows(2).any(|w| w[1] <= w[0])
    {
        return Err(LabError::validation(format!(
            "caps must be increasing and above {above}"
        )));
    }
    Ok(())
}

pub const REGISTRY: [&str; 8] = [
    "brownian_baseline",
    "smooth_drift_crosscheck",
    "weierstrass_drift",
    "atom_jump",
    "stable_jump",
    "path_dependent_drift",
    "counterexample_stable",
    "counterexample_cauchy",
];

fn sim(n_paths: usize, n_steps: usize) -> SimConfig {
    SimConfig {
        n_paths,
        n_steps,
        ..SimConfig::default()
    }
}

/// Built-in scenario by name.
pub fn registry(name: &str) -> Result<ScenarioSpec> {
    use Diagnostic::*;
    let base = |name: &str, s: SimConfig, diagnostics: Vec<Diagnostic>| ScenarioSpec {
        name: name.into(),
        coefficients: CoefficientDecl::default(),
        kernel: KernelDecl::Empty,
        truncation: TruncationFunction::default(),
        functional: PathFunctionalH::Zero,
        sim: s,
        diagnostics,
        counterexample: None,
    };
    let spec = match name {
        "brownian_baseline" => base(
            name,
            sim(10_000, 320),
            vec![
                TransformIdentities,
                SquareIdentity,
                Martingale,
                Girsanov,
                Qv,
                ChainRule,
                GammaQv,
                Decomposition,
            ],
        ),
        "smooth_drift_crosscheck" => ScenarioSpec {
            coefficients: CoefficientDecl {
                drift: DriftDecl::ClampedLinear {
                    slope: 0.3,
                    lo: -4.0,
                    hi: 4.0,
                },
                ..CoefficientDecl::default()
            },
            ..base(
                name,
                sim(10_000, 200),
                vec![TransformIdentities, Crosscheck, Decomposition],
            )
        },
        "weierstrass_drift" => ScenarioSpec {
            coefficients: CoefficientDecl {
                drift: DriftDecl::Weierstrass {
                    amplitude: 0.5,
                    terms: 9,
                },
                half_width: 4.0,
                cells_per_side: 2000,
                mollifier: MollifierConfig {
                    widths: vec![1e-4, 1e-5],
                    ..MollifierConfig::default()
                },
                ..CoefficientDecl::default()
            },
            ..base(
                name,
                sim(10_000, 200),
                vec![TransformIdentities, SquareIdentity, Conjugation, Martingale],
            )
        },
        "atom_jump" => ScenarioSpec {
            coefficients: CoefficientDecl {
                drift: DriftDecl::Weierstrass {
                    amplitude: 0.2,
                    terms: 3,
                },
                half_width: 6.0,
                cells_per_side: 600,
                ..CoefficientDecl::default()
            },
            kernel: KernelDecl::Atoms {
                rate: 1.0,
                atoms: vec![(0.6, 0.5), (-0.4, 0.5)],
                alpha: 0.0,
            },
            ..base(
                name,
                sim(10_000, 200),
                vec![Conjugation, Martingale, Compensator, Qv, ChainRule, GammaQv],
            )
        },
        "stable_jump" => ScenarioSpec {
            kernel: KernelDecl::Stable {
                gamma: 1.5,
                scale: 0.5,
                alpha: 1.0,
            },
            ..base(
                name,
                sim(4000, 160),
                vec![KernelMoment, Compensator, Qv, ChainRule, Dirichlet],
            )
        },
        "path_dependent_drift" => ScenarioSpec {
            functional: PathFunctionalH::RunningSupClamp {
                scale: 0.5,
                cap: 1.0,
            },
            ..base(name, sim(10_000, 200), vec![Martingale, Girsanov])
        },
        "counterexample_stable" => ScenarioSpec {
            counterexample: Some(CounterexampleDecl::Stable {
                gamma: 0.5,
                scale: 0.5,
                caps: vec![10.0, 100.0, 1000.0],
            }),
            ..base(name, sim(40_000, 20), Vec::new())
        },
        "counterexample_cauchy" => ScenarioSpec {
            counterexample: Some(CounterexampleDecl::Cauchy {
                n_samples: 1_000_000,
                caps: vec![10.0, 100.0, 1000.0],
            }),
            ..base(name, sim(1, 1), Vec::new())
        },
        _ => {
            return Err(LabError::validation(format!(
                "unknown scenario {name}; known: {}",
                REGISTRY.join(", ")
            )))
        }
    };
    Ok(spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticOutcome {
    pub name: String,
    pub status: Status,
    /// The checked statistic; compared against `tolerance`.
    pub statistic: f64,
    pub tolerance: f64,
    pub details: serde_json::Value,
}

impl DiagnosticOutcome {
    fn below(name: &str, statistic: f64, tolerance: f64, details: serde_json::Value) -> Self {
        Self {
            name: name.into(),
            status: if statistic < tolerance {
                Status::Pass
            } else {
                Status::Fail
            },
            statistic,
            tolerance,
            details,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub scenario: ScenarioSpec,
    pub seed: u64,
    pub hypotheses: Option<serde_json::Value>,
    pub simulation: Option<EnsembleSummary>,
    pub diagnostics: Vec<DiagnosticOutcome>,
    pub verdict: Option<DirichletVerdict>,
    pub status: Status,
    /// Kept out of the serialized form so reruns are byte-identical.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl PartialEq for RunReport {
    fn eq(&self, other: &Self) -> bool {
        self.schema == other.schema
            && self.scenario == other.scenario
            && self.seed == other.seed
            && self.hypotheses == other.hypotheses
            && self.simulation == other.simulation
            && self.diagnostics == other.diagnostics
            && self.verdict == other.verdict
            && self.status == other.status
    }
}

impl RunReport {
    fn new(scenario: &ScenarioSpec) -> Self {
        Self {
            schema: REPORT_SCHEMA.into(),
            scenario: scenario.clone(),
            seed: scenario.sim.master_seed,
            hypotheses: None,
            simulation: None,
            diagnostics: Vec::new(),
            verdict: None,
            status: Status::Pass,
            wall_clock_seconds: 0.0,
        }
    }

    fn finish(mut self, started: Instant) -> Self {
        // JSON has no infinities or NaN.
        for d in &mut self.diagnostics {
            for v in [&mut d.statistic, &mut d.tolerance] {
                if !v.is_finite() {
                    *v = if *v < 0.0 { f64::MIN } else { f64::MAX };
                }
            }
        }
        self.status = if self.diagnostics.iter().any(|d| d.status == Status::Fail) {
            Status::Fail
        } else if self
            .diagnostics
            .iter()
            .any(|d| d.status == Status::Inconclusive)
        {
            Status::Inconclusive
        } else {
            Status::Pass
        };
        self.wall_clock_seconds = started.elapsed().as_secs_f64();
        self
    }

    pub fn diagnostic(&self, name: &str) -> Option<&DiagnosticOutcome> {
        self.diagnostics.iter().find(|d| d.name == name)
    }

    /// 0 unless a diagnostic failed.
    pub fn exit_code(&self) -> i32 {
        match self.status {
            Status::Fail => 1,
            _ => 0,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)
            .map_err(|e| LabError::Serialization(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| LabError::Serialization(e.to_string()))
    }

    /// CSV with columns `diagnostic,status,statistic,tolerance`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "diagnostic,status,statistic,tolerance")?;
        for d in &self.diagnostics {
            let status = serde_json::to_value(d.status)
                .map_err(|e| LabError::Serialization(e.to_string()))?;
            writeln!(
                out,
                "{},{},{},{}",
                d.name,
                status.as_str().unwrap_or_default(),
                d.statistic,
                d.tolerance
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Writes `<scenario>.report.json` or `<scenario>.report.csv` into `dir`.
pub fn emit_report(report: &RunReport, format: ReportFormat, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = match format {
        ReportFormat::Json => {
            let path = dir.join(format!("{}.report.json", report.scenario.name));
            fs::write(&path, report.to_json()?)?;
            path
        }
        ReportFormat::Csv => {
            let path = dir.join(format!("{}.report.csv", report.scenario.name));
            let mut buf = Vec::new();
            report.write_csv(&mut buf)?;
            fs::write(&path, buf)?;
            path
        }
    };
    Ok(path)
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

/// Runs the hypothesis checks; any failure is a validation error, raised
/// before anything is simulated.
pub fn hypothesis_gate(spec: &ScenarioSpec, dynamics: &Dynamics) -> Result<serde_json::Value> {
    let coeffs = &dynamics.coeffs;
    let range = spec
        .coefficients
        .truncation_range
        .unwrap_or(spec.coefficients.half_width);
    let report = check_hypotheses(&coeffs.sigma_fn, range)?;
    if !report.bounded_and_holder_plausible {
        return Err(LabError::validation(format!(
            "scenario {}: Σ fails the boundedness/Hölder checks (sup {} at full range)",
            spec.name, report.sup_norm
        )));
    }
    if !coeffs.h.is_identity() && !coeffs.sigma_fn.converged {
        return Err(LabError::validation(format!(
            "scenario {}: Σ did not converge",
            spec.name
        )));
    }
    Ok(to_value(&report))
}

/// Hypothesis checks, then simulation of the scenario's ensemble.
pub fn simulate_scenario(spec: &ScenarioSpec) -> Result<(Dynamics, Ensemble)> {
    spec.validate()?;
    let dynamics = spec.dynamics()?;
    hypothesis_gate(spec, &dynamics)?;
    let chars = CharacteristicsY::from_dynamics(&dynamics, &spec.sim)?;
    let ensemble = simulate_y(&chars, &spec.functional, &spec.sim)?;
    Ok((dynamics, ensemble))
}

/// Hypothesis checks, then simulation, then the requested diagnostics.
/// Artifacts go to `out_dir` when given.
pub fn run_scenario(spec: &ScenarioSpec, out_dir: Option<&Path>) -> Result<RunReport> {
    let started = Instant::now();
    spec.validate()?;
    if let Some(ce) = &spec.counterexample {
        let report = match ce {
            CounterexampleDecl::Stable { gamma, scale, caps } => {
                counterexample_stable_report(spec, *gamma, *scale, caps)?
            }
            CounterexampleDecl::Cauchy { n_samples, caps } => {
                counterexample_cauchy_report(spec, *n_samples, caps)?
            }
        };
        let report = report.finish(started);
        if let Some(dir) = out_dir {
            emit_report(&report, ReportFormat::Json, dir)?;
        }
        return Ok(report);
    }
    let dynamics = spec.dynamics()?;
    let mut report = RunReport::new(spec);
    report.hypotheses = Some(hypothesis_gate(spec, &dynamics)?);
    let ensemble = if spec.diagnostics.iter().any(|d| d.needs_simulation()) {
        let chars = CharacteristicsY::from_dynamics(&dynamics, &spec.sim)?;
        let e = simulate_y(&chars, &spec.functional, &spec.sim)?;
        report.simulation = Some(e.summary());
        Some(e)
    } else {
        None
    };
    for &d in &spec.diagnostics {
        let outcome = run_diagnostic(d, spec, &dynamics, ensemble.as_ref())?;
        report.diagnostics.push(outcome);
    }
    let report = report.finish(started);
    if let Some(dir) = out_dir {
        write_artifacts(spec, &dynamics, ensemble.as_ref(), &report, dir)?;
    }
    Ok(report)
}

fn write_artifacts(
    spec: &ScenarioSpec,
    dynamics: &Dynamics,
    ensemble: Option<&Ensemble>,
    report: &RunReport,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut buf = Vec::new();
    dynamics.coeffs.h.write_csv(&mut buf)?;
    fs::write(dir.join(format!("{}.sigma_h.csv", spec.name)), &buf)?;
    if let Some(e) = ensemble {
        let head = Ensemble {
            config: e.config.clone(),
            times: e.times.clone(),
            paths: e.paths.iter().take(PATHS_CSV_LIMIT).cloned().collect(),
            excluded: e.excluded.clone(),
        };
        buf.clear();
        head.write_csv(&mut buf)?;
        fs::write(dir.join(format!("{}.paths.csv", spec.name)), &buf)?;
    }
    emit_report(report, ReportFormat::Json, dir)?;
    Ok(())
}

fn need(ensemble: Option<&Ensemble>) -> &Ensemble {
    ensemble.expect("simulation runs whenever a diagnostic needs it")
}

/// Runs one diagnostic against a simulated ensemble.
pub fn run_diagnostic(
    d: Diagnostic,
    spec: &ScenarioSpec,
    dynamics: &Dynamics,
    ensemble: Option<&Ensemble>,
) -> Result<DiagnosticOutcome> {
    let name = to_value(&d).as_str().unwrap_or_default().to_string();
    match d {
        Diagnostic::TransformIdentities => transform_identities(&name, dynamics),
        Diagnostic::SquareIdentity => square_identity(&name, dynamics),
        Diagnostic::KernelMoment => kernel_moment(&name, dynamics),
        Diagnostic::Conjugation => conjugation(&name, spec, dynamics, need(ensemble)),
        Diagnostic::Martingale => martingale(&name, spec, dynamics, need(ensemble)),
        Diagnostic::Compensator => compensator(&name, spec, dynamics, need(ensemble)),
        Diagnostic::Girsanov => girsanov(&name, spec, need(ensemble)),
        Diagnostic::Crosscheck => crosscheck(&name, spec, dynamics, need(ensemble)),
        Diagnostic::Qv => qv(&name, need(ensemble)),
        Diagnostic::ChainRule => chain_rule(&name, need(ensemble)),
        Diagnostic::GammaQv => gamma_qv(&name, dynamics, need(ensemble)),
        Diagnostic::Dirichlet => dirichlet(&name, dynamics, need(ensemble)),
        Diagnostic::Decomposition => decomposition(&name, dynamics, need(ensemble)),
    }
}

/// Evenly spaced interior points of `[lo, hi]`.
fn probes(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (1..=n)
        .map(|i| lo + (hi - lo) * i as f64 / (n + 1) as f64)
        .collect()
}

fn transform_identities(name: &str, dynamics: &Dynamics) -> Result<DiagnosticOutcome> {
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
    let ok = node_gap == 0.0 && round_trip < 1e-6 && l_identity == 0.0;
    Ok(DiagnosticOutcome {
        name: name.into(),
        status: if ok { Status::Pass } else { Status::Fail },
        statistic: round_trip,
        tolerance: 1e-6,
        details: json!({ "node_gap": node_gap, "round_trip": round_trip, "l_identity": l_identity }),
    })
}

fn square_fixtures() -> Vec<TestFunction> {
    vec![
        TestFunction::identity(),
        TestFunction::sin(),
        TestFunction::tanh(),
        TestFunction::arctan(),
        TestFunction::soft_square(2.0),
    ]
}

fn square_identity(name: &str, dynamics: &Dynamics) -> Result<DiagnosticOutcome> {
    let h = &dynamics.coeffs.h;
    let (lo, hi) = h.x_range();
    let points = probes(lo, hi, 200);
    let mut per = serde_json::Map::new();
    let mut worst = 0.0f64;
    for f in square_fixtures() {
        let r = verify_square_identity(&f, h, &dynamics.coeffs.diffusion, &points)?;
        worst = worst.max(r);
        per.insert(f.name.clone(), json!(r));
    }
    Ok(DiagnosticOutcome::below(
        name,
        worst,
        1e-6,
        serde_json::Value::Object(per),
    ))
}

const KERNEL_MOMENT_SPREAD: f64 = 1e-12;

fn kernel_moment(name: &str, dynamics: &Dynamics) -> Result<DiagnosticOutcome> {
    let (lo, hi) = dynamics.coeffs.h.x_range();
    let ys = probes(lo, hi, 9);
    let report = moment_bound(&dynamics.kernel, &dynamics.truncation, &ys)?;
    let moments: Vec<f64> = report.rows.iter().map(|r| r.moment).collect();
    let spread = moments.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - moments.iter().cloned().fold(f64::INFINITY, f64::min);
    // Every declarable kernel is state-independent, so the tilted moment
    // must not move with y.
    let pass = report.bound.is_finite() && spread <= KERNEL_MOMENT_SPREAD;
    Ok(DiagnosticOutcome {
        name: name.into(),
        status: if pass { Status::Pass } else { Status::Fail },
        statistic: spread,
        tolerance: KERNEL_MOMENT_SPREAD,
        details: json!({ "alpha": report.alpha, "bound": report.bound, "y_spread": spread }),
    })
}

const CONJUGATION_TRIPLES: usize = 20;

fn conjugation(
    name: &str,
    spec: &ScenarioSpec,
    dynamics: &Dynamics,
    ensemble: &Ensemble,
) -> Result<DiagnosticOutcome> {
    let fixtures = square_fixtures();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.sim.master_seed);
    rng.set_stream(u64::MAX);
    let mut worst = 0.0f64;
    for _ in 0..CONJUGATION_TRIPLES {
        let p = &ensemble.paths[rng.random_range(0..ensemble.paths.len())];
        let i = rng.random_range(1..p.x.len());
        let f = &fixtures[rng.random_range(0..fixtures.len())];
        let view = CaglapPathView::new(&ensemble.times, &p.x)?;
        worst = worst.max(conjugation_residual(
            f,
            &spec.functional,
            dynamics,
            &view,
            i,
        )?);
    }
    Ok(DiagnosticOutcome::below(
        name,
        worst,
        1e-6,
        json!({ "triples": CONJUGATION_TRIPLES }),
    ))
}

pub fn martingale_test_functions() -> Vec<TestFunction> {
    vec![
        TestFunction::sin(),
        TestFunction::cos(),
        TestFunction::tanh(),
        TestFunction::arctan(),
        TestFunction::soft_square(2.0),
    ]
}

fn martingale(
    name: &str,
    spec: &ScenarioSpec,
    dynamics: &Dynamics,
    ensemble: &Ensemble,
) -> Result<DiagnosticOutcome> {
    let mid = spec.sim.n_steps / 2;
    let x_mid: Vec<f64> = ensemble.paths.iter().map(|p| p.x[mid]).collect();
    let mut checks = Vec::new();
    let mut worst = 0.0f64;
    for f in martingale_test_functions() {
        let residuals = ensemble
            .paths
            .par_iter()
            .map(|p| martingale_residual(&ensemble.times, &p.x, &f, &spec.functional, dynamics))
            .collect::<Result<Vec<_>>>()?;
        let check = martingale_statistics(&f.name, &residuals, &x_mid, mid);
        worst = worst.max(check.max_z());
        checks.push(check);
    }
    Ok(DiagnosticOutcome::below(
        name,
        worst,
        3.0,
        to_value(&checks),
    ))
}

fn compensator(
    name: &str,
    spec: &ScenarioSpec,
    dynamics: &Dynamics,
    ensemble: &Ensemble,
) -> Result<DiagnosticOutcome> {
    // Jumps of X with |w| above this always move Y by more than the cutoff,
    // so all of them are recorded.
    let delta = spec.sim.cutoff(&dynamics.truncation);
    let a = 1.5 * delta * dynamics.coeffs.h.inverse_lipschitz();
    let r = compensator_residual(ensemble, &Region::outer(a), &dynamics.kernel)?;
    let z = r.residual.z_score(0.0);
    Ok(DiagnosticOutcome::below(
        name,
        z,
        3.0,
        json!({ "threshold": a, "result": to_value(&r) }),
    ))
}

fn girsanov(name: &str, spec: &ScenarioSpec, ensemble: &Ensemble) -> Result<DiagnosticOutcome> {
    let dt = ensemble.dt();
    let kappa: Vec<f64> = ensemble
        .paths
        .iter()
        .map(|p| girsanov_weight(p, &spec.functional, dt).kappa_terminal)
        .collect();
    if spec.functional.is_zero() {
        let exact = kappa.iter().all(|&k| k == 1.0);
        return Ok(DiagnosticOutcome {
            name: name.into(),
            status: if exact { Status::Pass } else { Status::Fail },
            statistic: if exact { 0.0 } else { 1.0 },
            tolerance: 0.5,
            details: json!({ "identically_one": exact }),
        });
    }
    let m = mean_se(&kappa);
    Ok(DiagnosticOutcome::below(
        name,
        m.z_score(1.0),
        3.0,
        json!({ "kappa_terminal": to_value(&m) }),
    ))
}

fn crosscheck(
    name: &str,
    spec: &ScenarioSpec,
    dynamics: &Dynamics,
    ensemble: &Ensemble,
) -> Result<DiagnosticOutcome> {
    if !dynamics.kernel.is_empty() {
        return Err(LabError::validation(
            "crosscheck needs a scenario without jumps",
        ));
    }
    let config = SimConfig {
        master_seed: spec.sim.master_seed.wrapping_add(1),
        ..spec.sim.clone()
    };
    let direct = simulate_direct_euler(&dynamics.coeffs, &spec.functional, &config)?;
    let (a, b) = (ensemble.terminal_values(), direct.terminal_values());
    let z_mean = two_sample_z(mean_se(&a), mean_se(&b));
    let z_var = two_sample_z(variance_se(&a), variance_se(&b));
    Ok(DiagnosticOutcome::below(
        name,
        z_mean.max(z_var),
        3.0,
        json!({
            "transform_route": to_value(&ensemble.summary()),
            "direct_euler": to_value(&direct.summary()),
            "z_mean": z_mean,
            "z_variance": z_var,
        }),
    ))
}

fn qv_paths(ensemble: &Ensemble) -> Vec<GridPath> {
    let dt = ensemble.dt();
    ensemble
        .paths
        .iter()
        .take(QV_PATHS)
        .map(|p| GridPath::from_sample(p, dt))
        .collect()
}

fn ladder(ensemble: &Ensemble) -> Vec<f64> {
    grid_epsilon_ladder(ensemble.config.horizon, ensemble.config.n_steps)
}

fn relative_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

/// Ensemble means of the ε ladder of `[X, X]` against the predicted
/// `Σ (continuous increments)² + Σ jumps²`.
fn qv(name: &str, ensemble: &Ensemble) -> Result<DiagnosticOutcome> {
    let (est, predicted) = ensemble_qv(ensemble, QV_PATHS)?;
    Ok(DiagnosticOutcome::below(
        name,
        relative_gap(est.finest(), predicted),
        0.05,
        json!({ "estimate": to_value(&est), "predicted": predicted }),
    ))
}

/// Ensemble means over the first `n_paths` paths of the ε ladder of
/// `[X, X]_T`, with the mean predicted value.
pub fn ensemble_qv(ensemble: &Ensemble, n_paths: usize) -> Result<(QVEstimate, f64)> {
    let dt = ensemble.dt();
    let eps = ladder(ensemble);
    let t = ensemble.config.horizon;
    let id = C1Function::identity();
    let rows = ensemble
        .paths
        .par_iter()
        .take(n_paths)
        .map(|p| -> Result<(QVEstimate, f64)> {
            let g = GridPath::from_sample(p, dt);
            Ok((
                qv_ladder(&g, &eps, t)?,
                chain_rule_qv(&id, &g, &eps, t)?.predicted,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let first = rows
        .first()
        .ok_or_else(|| LabError::validation("quadratic variation needs at least one path"))?;
    let k = first.0.values.len();
    let values: Vec<f64> = (0..k)
        .map(|j| mean(&rows.iter().map(|r| r.0.values[j]).collect::<Vec<_>>()))
        .collect();
    let jump_sum = mean(&rows.iter().map(|r| r.0.jump_sum).collect::<Vec<_>>());
    let predicted = mean(&rows.iter().map(|r| r.1).collect::<Vec<_>>());
    let est = QVEstimate {
        t,
        epsilons: first.0.epsilons.clone(),
        continuous_part: (values[k - 1] - jump_sum).max(0.0),
        values,
        jump_sum,
    };
    Ok((est, predicted))
}

fn sin_c1() -> C1Function {
    C1Function {
        value: real_fn(f64::sin),
        derivative: real_fn(f64::cos),
    }
}

fn chain_rule(name: &str, ensemble: &Ensemble) -> Result<DiagnosticOutcome> {
    let paths = qv_paths(ensemble);
    let eps = ladder(ensemble);
    let t = ensemble.config.horizon;
    let phi = sin_c1();
    let mut predicted = Vec::new();
    let mut estimated = Vec::new();
    for p in &paths {
        let r = chain_rule_qv(&phi, p, &eps, t)?;
        predicted.push(r.predicted);
        estimated.push(r.finest());
    }
    let (p, e) = (mean(&predicted), mean(&estimated));
    Ok(DiagnosticOutcome::below(
        name,
        relative_gap(e, p),
        0.05,
        json!({ "phi": "sin", "predicted": p, "estimated": e }),
    ))
}

fn head(ensemble: &Ensemble, n: usize) -> Ensemble {
    Ensemble {
        config: ensemble.config.clone(),
        times: ensemble.times.clone(),
        paths: ensemble.paths.iter().take(n).cloned().collect(),
        excluded: Vec::new(),
    }
}

fn gamma_qv(name: &str, dynamics: &Dynamics, ensemble: &Ensemble) -> Result<DiagnosticOutcome> {
    let sub = head(ensemble, QV_PATHS);
    let est = gamma_residual_qv(&sub, &sin_c1(), dynamics, 0.0, &ladder(ensemble))?;
    let monotone = est.values.windows(2).all(|w| w[1] <= w[0]);
    let finest = est.finest();
    let status = if !monotone {
        Status::Inconclusive
    } else if finest < GAMMA_NOISE_BAND {
        Status::Pass
    } else {
        Status::Fail
    };
    Ok(DiagnosticOutcome {
        name: name.into(),
        status,
        statistic: finest,
        tolerance: GAMMA_NOISE_BAND,
        details: json!({ "phi": "sin", "monotone": monotone, "estimate": to_value(&est) }),
    })
}

fn dirichlet(name: &str, dynamics: &Dynamics, ensemble: &Ensemble) -> Result<DiagnosticOutcome> {
    let dt = ensemble.dt();
    let paths: Vec<GridPath> = ensemble
        .paths
        .iter()
        .map(|p| GridPath::from_sample(p, dt))
        .collect();
    let n = paths.len();
    let table = dirichlet_condition_int_y(
        &|x| x,
        &paths,
        1.0,
        &[n / 4, n / 2, n],
        &[10.0, 100.0, 1000.0],
    )?;
    let nu = nu_jump_structural_check(&dynamics.kernel, None)?;
    let gamma = gamma_residual_qv(
        &head(ensemble, QV_PATHS),
        &sin_c1(),
        dynamics,
        0.0,
        &ladder(ensemble),
    )?;
    let report = dirichlet_report(table, nu, Some(gamma), GAMMA_NOISE_BAND);
    let status = match report.verdict {
        DirichletVerdict::ConsistentWithDirichlet => Status::Pass,
        DirichletVerdict::Inconsistent => Status::Fail,
        DirichletVerdict::Inconclusive => Status::Inconclusive,
    };
    Ok(DiagnosticOutcome {
        name: name.into(),
        status,
        statistic: report.condition_int_y.last_cap_growth,
        tolerance: DIVERGENCE_GROWTH,
        details: to_value(&report),
    })
}

const DECOMPOSITION_PATHS: usize = 200;

fn decomposition(
    name: &str,
    dynamics: &Dynamics,
    ensemble: &Ensemble,
) -> Result<DiagnosticOutcome> {
    let sub = head(ensemble, DECOMPOSITION_PATHS);
    let levels = canonical_decomposition_residual(&sub, &dynamics.coeffs, &[6, 12])?;
    let last = &levels[levels.len() - 1];
    let (status, statistic) = match (levels[0].gap_to_limit, last.gap_to_limit) {
        (Some(first), Some(final_gap)) => (
            if final_gap <= first {
                Status::Pass
            } else {
                Status::Fail
            },
            final_gap,
        ),
        _ => (
            Status::Inconclusive,
            last.gap_to_previous.unwrap_or(f64::NAN),
        ),
    };
    Ok(DiagnosticOutcome {
        name: name.into(),
        status,
        statistic,
        tolerance: levels[0].gap_to_limit.unwrap_or(f64::MAX),
        details: to_value(&levels),
    })
}

/// `T ∫_{1<|x|<=M} |x| scale |x|^{-1-γ} dx`.
pub fn stable_truncated_mean(gamma: f64, scale: f64, horizon: f64, cap: f64) -> f64 {
    let one_side = if (gamma - 1.0).abs() < 1e-12 {
        cap.ln()
    } else {
        (cap.powf(1.0 - gamma) - 1.0) / (1.0 - gamma)
    };
    2.0 * scale * horizon * one_side
}

/// Runs the stable counterexample `X = W + S`: the big-jump variation of
/// `X` has a finite mean exactly when `γ > 1`.
pub fn counterexample_stable(
    gamma: f64,
    scale: f64,
    caps: &[f64],
    config: &SimConfig,
) -> Result<RunReport> {
    let spec = ScenarioSpec {
        counterexample: Some(CounterexampleDecl::Stable {
            gamma,
            scale,
            caps: caps.to_vec(),
        }),
        sim: config.clone(),
        ..registry("counterexample_stable")?
    };
    run_scenario(&spec, None)
}

fn counterexample_stable_report(
    spec: &ScenarioSpec,
    gamma: f64,
    scale: f64,
    caps: &[f64],
) -> Result<RunReport> {
    // The tilted moment needs α > γ - 1.
    let alpha = if gamma >= 1.0 { 1.0 } else { 0.0 };
    let dynamics = Dynamics {
        coeffs: CoefficientSet::brownian(1.0, spec.coefficients.half_width),
        kernel: JumpKernelSpec::stable(gamma, scale, alpha),
        truncation: spec.truncation,
    };
    let chars = CharacteristicsY::from_dynamics(&dynamics, &spec.sim)?;
    let ensemble = simulate_y(&chars, &PathFunctionalH::Zero, &spec.sim)?;
    let dt = ensemble.dt();
    let paths: Vec<GridPath> = ensemble
        .paths
        .iter()
        .map(|p| GridPath::from_sample(p, dt))
        .collect();
    let n = paths.len();
    let sizes: Vec<usize> = [1000, n / 4, n / 2, n]
        .into_iter()
        .filter(|&k| k > 0 && k <= n)
        .collect();
    let table = dirichlet_condition_int_y(&|x| x, &paths, 1.0, &sizes, caps)?;
    let nu = nu_jump_structural_check(&dynamics.kernel, None)?;
    let report = dirichlet_report(table, nu, None, GAMMA_NOISE_BAND);
    let t = spec.sim.horizon;
    let rows: Vec<serde_json::Value> = report
        .condition_int_y
        .by_cap
        .iter()
        .map(|r| {
            let m = r.cap.unwrap_or(f64::MAX);
            let oracle = stable_truncated_mean(gamma, scale, t, m);
            json!({ "cap": m, "mean": r.mean, "se": r.se, "oracle": oracle, "relative_error": relative_gap(r.mean, oracle) })
        })
        .collect();
    let (statistic, expected_verdict) = if gamma < 1.0 {
        let worst = report
            .condition_int_y
            .by_cap
            .iter()
            .map(|r| {
                relative_gap(
                    r.mean,
                    stable_truncated_mean(gamma, scale, t, r.cap.unwrap_or(f64::MAX)),
                )
            })
            .fold(0.0, f64::max);
        (worst, DirichletVerdict::Inconsistent)
    } else {
        let limit = 2.0 * scale * t / (gamma - 1.0);
        let top = report.condition_int_y.by_cap.last().map_or(0.0, |r| r.mean);
        (
            relative_gap(top, limit),
            DirichletVerdict::ConsistentWithDirichlet,
        )
    };
    let verdict = report.verdict;
    let mut out = RunReport::new(spec);
    out.simulation = Some(ensemble.summary());
    out.verdict = Some(verdict);
    out.diagnostics.push(DiagnosticOutcome {
        name: "counterexample_stable".into(),
        status: if statistic < 0.10 && verdict == expected_verdict {
            Status::Pass
        } else {
            Status::Fail
        },
        statistic,
        tolerance: 0.10,
        details: json!({ "gamma": gamma, "scale": scale, "caps": rows, "report": to_value(&report) }),
    });
    Ok(out)
}

/// `E[|Z| 1_{|Z| <= M}]` for standard Cauchy `Z`.
pub fn cauchy_truncated_mean(cap: f64) -> f64 {
    (cap * cap).ln_1p() / std::f64::consts::PI
}

/// Cauchy counterexample: `φ(X) = X²` jumps by `|Z|`, whose truncated means
/// grow like `ln M` without a limit.
pub fn counterexample_cauchy(n_samples: usize, caps: &[f64], seed: u64) -> Result<RunReport> {
    let mut spec = registry("counterexample_cauchy")?;
    spec.counterexample = Some(CounterexampleDecl::Cauchy {
        n_samples,
        caps: caps.to_vec(),
    });
    spec.sim.master_seed = seed;
    run_scenario(&spec, None)
}

const CAUCHY_CHUNK: usize = 65_536;

fn counterexample_cauchy_report(
    spec: &ScenarioSpec,
    n_samples: usize,
    caps: &[f64],
) -> Result<RunReport> {
    let law = Cauchy::new(0.0, 1.0).map_err(|e| LabError::validation(e.to_string()))?;
    let n_chunks = n_samples.div_ceil(CAUCHY_CHUNK);
    let z: Vec<f64> = (0..n_chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = spec.sim.path_rng(c);
            let len = CAUCHY_CHUNK.min(n_samples - c * CAUCHY_CHUNK);
            (0..len).map(move |_| rng.sample(law)).collect::<Vec<f64>>()
        })
        .collect();
    // X jumps at t = 1 from 0 to sign(Z) sqrt|Z|; φ(x) = x² then jumps by |Z|.
    let x_jump: Vec<f64> = z.iter().map(|v| v.signum() * v.abs().sqrt()).collect();
    let martingale = mean_se(&x_jump);
    let rows: Vec<(f64, MeanSe, f64)> = caps
        .iter()
        .map(|&m| {
            let v: Vec<f64> = z
                .iter()
                .map(|v| if v.abs() <= m { v.abs() } else { 0.0 })
                .collect();
            (m, mean_se(&v), cauchy_truncated_mean(m))
        })
        .collect();
    let worst = rows
        .iter()
        .map(|(_, s, o)| relative_gap(s.mean, *o))
        .fold(0.0, f64::max);
    let increasing = rows.windows(2).all(|w| w[1].1.mean > w[0].1.mean);
    let verdict = if increasing {
        DirichletVerdict::Inconsistent
    } else {
        DirichletVerdict::Inconclusive
    };
    let mut out = RunReport::new(spec);
    out.verdict = Some(verdict);
    out.diagnostics.push(DiagnosticOutcome {
        name: "counterexample_cauchy".into(),
        status: if worst < 0.05 && increasing { Status::Pass } else { Status::Fail },
        statistic: worst,
        tolerance: 0.05,
        details: json!({
            "n_samples": n_samples,
            "caps": rows.iter().map(|(m, s, o)| json!({ "cap": m, "mean": s.mean, "se": s.se, "oracle": o })).collect::<Vec<_>>(),
            "strictly_increasing": increasing,
            "jump_mean": to_value(&martingale),
            "jump_mean_z": martingale.z_score(0.0),
        }),
    });
    Ok(out)
}
