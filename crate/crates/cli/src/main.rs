use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use jumpdrift::coefficients::check_hypotheses;
use jumpdrift::kernels::moment_bound;
use jumpdrift::scenarios::{
    counterexample_cauchy, counterexample_stable, emit_report, ensemble_qv, registry, run_scenario,
    simulate_scenario, Diagnostic, ReportFormat, RunReport, ScenarioSpec, OUT_DIR_ENV, REGISTRY,
};
use jumpdrift::{LabError, Result};

#[derive(Parser)]
#[command(
    name = "jumpdrift",
    version,
    about = "Jump SDEs with distributional drift: simulation and diagnostics"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in scenario, used when no config file is given.
    #[arg(long, global = true)]
    scenario: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true, env = OUT_DIR_ENV)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    paths: Option<usize>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Json => ReportFormat::Json,
            Format::Csv => ReportFormat::Csv,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Counterexample {
    Stable,
    Cauchy,
}

#[derive(Subcommand)]
enum Command {
    /// Σ, h and the hypothesis checks; writes the Σ/h table.
    CheckCoefficients,
    /// Tilted moment bound and continuity modulus of the jump kernel.
    CheckKernel,
    /// Simulates the scenario and writes the paths.
    Simulate,
    /// Martingale-problem residuals.
    VerifyMartingale,
    /// Quadratic variation along the ε ladder.
    Qv,
    /// Dirichlet-property diagnostics.
    Dirichlet,
    /// One of the two counterexamples.
    Counterexample {
        #[arg(long, value_enum, default_value_t = Counterexample::Stable)]
        kind: Counterexample,
        #[arg(long, default_value_t = 0.5)]
        gamma: f64,
        #[arg(long, default_value_t = 0.5)]
        scale: f64,
        #[arg(long, value_delimiter = ',', default_values_t = [10.0, 100.0, 1000.0])]
        caps: Vec<f64>,
    },
    /// Full scenario: hypothesis checks, simulation and all diagnostics.
    Run,
    /// Lists the built-in scenarios.
    List,
}

fn load_spec(common: &Common, fallback: &str) -> Result<ScenarioSpec> {
    let spec = match (&common.config, &common.scenario) {
        (Some(path), _) => ScenarioSpec::load(path)?,
        (None, Some(name)) => registry(name)?,
        (None, None) => registry(fallback)?,
    };
    let spec = spec.with_overrides(common.seed, common.paths, common.steps);
    spec.validate()?;
    Ok(spec)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| LabError::Serialization(e.to_string()))?;
    writeln!(io::stdout(), "{text}")?;
    Ok(())
}

fn print_report(report: &RunReport, common: &Common) -> Result<()> {
    match common.format {
        Format::Json => write!(io::stdout(), "{}", report.to_json()?)?,
        Format::Csv => report.write_csv(io::stdout())?,
    }
    if let Some(dir) = &common.out {
        emit_report(report, common.format.into(), dir)?;
    }
    eprintln!(
        "{}: {:?} in {:.1}s",
        report.scenario.name, report.status, report.wall_clock_seconds
    );
    Ok(())
}

fn with_diagnostics(mut spec: ScenarioSpec, diagnostics: &[Diagnostic]) -> ScenarioSpec {
    spec.diagnostics = diagnostics.to_vec();
    spec
}

fn write_file(
    dir: &Path,
    name: &str,
    write: impl FnOnce(&mut Vec<u8>) -> Result<()>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut buf = Vec::new();
    write(&mut buf)?;
    std::fs::write(dir.join(name), buf)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<i32> {
    let common = &cli.common;
    let report = match &cli.command {
        Command::List => {
            for name in REGISTRY {
                writeln!(io::stdout(), "{name}")?;
            }
            return Ok(0);
        }
        Command::CheckCoefficients => {
            let spec = load_spec(common, "weierstrass_drift")?;
            let coeffs = spec.coefficients.build()?;
            let range = spec
                .coefficients
                .truncation_range
                .unwrap_or(spec.coefficients.half_width);
            let hyp = check_hypotheses(&coeffs.sigma_fn, range)?;
            if let Some(dir) = &common.out {
                write_file(dir, &format!("{}.sigma_h.csv", spec.name), |b| {
                    coeffs.h.write_csv(b)
                })?;
            }
            match common.format {
                Format::Json => print_json(&hyp)?,
                Format::Csv => coeffs.h.write_csv(io::stdout())?,
            }
            return Ok(if hyp.bounded_and_holder_plausible {
                0
            } else {
                1
            });
        }
        Command::CheckKernel => {
            let spec = load_spec(common, "stable_jump")?;
            let kernel = spec.kernel.build()?;
            let grid: Vec<f64> = (-4..=4).map(|i| i as f64 * 0.5).collect();
            let report = moment_bound(&kernel, &spec.truncation, &grid)?;
            if let Some(dir) = &common.out {
                write_file(dir, &format!("{}.kernel.csv", spec.name), |b| {
                    report.write_csv(b)
                })?;
            }
            match common.format {
                Format::Json => print_json(&report)?,
                Format::Csv => report.write_csv(io::stdout())?,
            }
            return Ok(0);
        }
        Command::Simulate => {
            let spec = load_spec(common, "brownian_baseline")?;
            let (_, ensemble) = simulate_scenario(&spec)?;
            if let Some(dir) = &common.out {
                write_file(dir, &format!("{}.paths.csv", spec.name), |b| {
                    ensemble.write_csv(b)
                })?;
            }
            match common.format {
                Format::Json => print_json(&ensemble.summary())?,
                Format::Csv => ensemble.write_csv(io::stdout())?,
            }
            return Ok(0);
        }
        Command::Qv => {
            let spec = load_spec(common, "brownian_baseline")?;
            let (_, ensemble) = simulate_scenario(&spec)?;
            let (est, predicted) = ensemble_qv(&ensemble, ensemble.paths.len())?;
            if let Some(dir) = &common.out {
                write_file(dir, &format!("{}.qv.csv", spec.name), |b| est.write_csv(b))?;
            }
            match common.format {
                Format::Json => {
                    print_json(&serde_json::json!({ "estimate": est, "predicted": predicted }))?
                }
                Format::Csv => est.write_csv(io::stdout())?,
            }
            return Ok(0);
        }
        Command::VerifyMartingale => {
            let spec = load_spec(common, "atom_jump")?;
            run_scenario(
                &with_diagnostics(spec, &[Diagnostic::Martingale]),
                common.out.as_deref(),
            )?
        }
        Command::Dirichlet => {
            let spec = load_spec(common, "stable_jump")?;
            run_scenario(
                &with_diagnostics(spec, &[Diagnostic::Dirichlet]),
                common.out.as_deref(),
            )?
        }
        Command::Counterexample {
            kind,
            gamma,
            scale,
            caps,
        } => match kind {
            Counterexample::Stable => {
                let spec = load_spec(common, "counterexample_stable")?;
                counterexample_stable(*gamma, *scale, caps, &spec.sim)?
            }
            Counterexample::Cauchy => {
                let spec = load_spec(common, "counterexample_cauchy")?;
                counterexample_cauchy(
                    common.paths.unwrap_or(1_000_000),
                    caps,
                    spec.sim.master_seed,
                )?
            }
        },
        Command::Run => {
            let spec = load_spec(common, "brownian_baseline")?;
            run_scenario(&spec, common.out.as_deref())?
        }
    };
    print_report(&report, common)?;
    Ok(report.exit_code())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
