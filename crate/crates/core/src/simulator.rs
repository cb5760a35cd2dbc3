//! Euler scheme for `Y = h(X)` with thinned big jumps and compensated or
//! Gaussian-matched small jumps, the direct Euler route for classical
//! drifts, and Girsanov reweighting.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::{
    make_test_function_sequence, C1Function, CoefficientSet, DiffusionSpec, HTransform,
};
use crate::error::{LabError, Result};
use crate::generator::{Dynamics, PathFunctionalH};
use crate::kernels::{
    drift_correction_b, pushforward_f, JumpKernelSpec, JumpLaw, KernelVariant, Orders, Region,
    TruncationFunction,
};
use crate::stats::{mean, mean_se, variance_se, MeanSe};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmallJumpMode {
    Drop,
    GaussianMatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub horizon: f64,
    pub n_steps: usize,
    pub n_paths: usize,
    pub master_seed: u64,
    pub x0: f64,
    /// Jumps of `Y` with `|z| <= δ` are not simulated individually.
    /// Defaults to `0.05 R`.
    #[serde(default)]
    pub small_jump_cutoff: Option<f64>,
    #[serde(default = "default_small_jump_mode")]
    pub small_jump_mode: SmallJumpMode,
    /// Rate of the dominating Poisson stream; derived from the kernel if unset.
    #[serde(default)]
    pub intensity_bound: Option<f64>,
}

fn default_small_jump_mode() -> SmallJumpMode {
    SmallJumpMode::GaussianMatch
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            n_steps: 100,
            n_paths: 1000,
            master_seed: 0,
            x0: 0.0,
            small_jump_cutoff: None,
            small_jump_mode: SmallJumpMode::GaussianMatch,
            intensity_bound: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self, truncation: &TruncationFunction) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(LabError::validation(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        if self.n_steps == 0 || self.n_paths == 0 {
            return Err(LabError::validation("n_steps and n_paths must be positive"));
        }
        let delta = self.cutoff(truncation);
        if !(delta > 0.0 && delta < truncation.radius) {
            return Err(LabError::validation(format!(
                "small-jump cutoff must lie in (0, R = {}), got {delta}",
                truncation.radius
            )));
        }
        if let Some(l) = self.intensity_bound {
            if !(l > 0.0 && l.is_finite()) {
                return Err(LabError::validation("intensity bound must be positive"));
            }
        }
        Ok(())
    }

    pub fn cutoff(&self, truncation: &TruncationFunction) -> f64 {
        self.small_jump_cutoff.unwrap_or(0.05 * truncation.radius)
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps)
            .map(|i| self.horizon * i as f64 / self.n_steps as f64)
            .collect()
    }

    /// Independent generator for path `index`.
    pub fn path_rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(index as u64);
        rng
    }
}

const TABLE_NODES: usize = 1025;

/// Tabulated jump characteristics of `Y` on a uniform grid.
#[derive(Debug, Clone)]
struct JumpTable {
    y0: f64,
    dy: f64,
    /// `b`
    drift: Vec<f64>,
    /// `κ_δ = ∫_{|z|>δ} k(z) F(y, dz)`
    big_compensator: Vec<f64>,
    /// `∫_{|z|<=δ} z² F(y, dz)`
    small_variance: Vec<f64>,
    /// `F(y, {|z| > δ})`
    big_mass: Vec<f64>,
}

impl JumpTable {
    fn interp(&self, values: &[f64], y: f64) -> f64 {
        if values.len() == 1 {
            return values[0];
        }
        let n = values.len();
        let s = ((y - self.y0) / self.dy).clamp(0.0, (n - 1) as f64);
        let i = (s.floor() as usize).min(n - 2);
        let t = s - i as f64;
        values[i] + t * (values[i + 1] - values[i])
    }
}

/// How candidate big jumps are proposed and thinned.
#[derive(Debug, Clone, Copy)]
enum Proposal {
    None,
    /// Evaluate the atoms of `Q(x, .)` at each candidate.
    Atoms,
    /// Candidates from `rate_max * law`, accepted with `rate(x) / Λ`.
    Law,
    /// Candidates from the stable density on `|w| > w_min`.
    StableTail {
        gamma: f64,
        w_min: f64,
        mass: f64,
    },
}

/// Characteristics `(b + σ0 H̄, σ0², F)` of `Y` with the jump parts tabulated.
#[derive(Debug, Clone)]
pub struct CharacteristicsY {
    pub h: Arc<HTransform>,
    pub diffusion: DiffusionSpec,
    pub kernel: JumpKernelSpec,
    pub truncation: TruncationFunction,
    pub delta: f64,
    pub intensity_bound: f64,
    table: Option<JumpTable>,
    proposal: Proposal,
}

impl CharacteristicsY {
    pub fn from_dynamics(dynamics: &Dynamics, config: &SimConfig) -> Result<Self> {
        config.validate(&dynamics.truncation)?;
        dynamics.kernel.validate()?;
        dynamics.truncation.validate()?;
        let h = dynamics.coeffs.h.clone();
        let kernel = dynamics.kernel.clone();
        let k = dynamics.truncation;
        let delta = config.cutoff(&k);
        if kernel.is_empty() {
            return Ok(Self {
                h,
                diffusion: dynamics.coeffs.diffusion.clone(),
                kernel,
                truncation: k,
                delta,
                intensity_bound: 0.0,
                table: None,
                proposal: Proposal::None,
            });
        }
        let (y_lo, y_hi) = h.y_range();
        let constant = h.is_identity() && kernel.is_state_independent();
        let nodes = if constant { 1 } else { TABLE_NODES };
        let dy = if nodes > 1 {
            (y_hi - y_lo) / (nodes - 1) as f64
        } else {
            1.0
        };
        let ys: Vec<f64> = (0..nodes)
            .map(|i| if nodes > 1 { y_lo + dy * i as f64 } else { 0.0 })
            .collect();
        let p = 1.0 + kernel.alpha;
        let rows = ys
            .par_iter()
            .map(|&y| -> Result<[f64; 4]> {
                let y = y.clamp(y_lo, y_hi);
                let b = drift_correction_b(&kernel, &h, &k, y)?;
                let kappa = pushforward_f(
                    &kernel,
                    &h,
                    y,
                    &|z| k.eval(z),
                    &Region::outer(delta),
                    Orders::new(p, 0.0),
                )?;
                let small = pushforward_f(
                    &kernel,
                    &h,
                    y,
                    &|z| z * z,
                    &Region::inner(delta),
                    Orders::new(2.0, 2.0),
                )?;
                let big = pushforward_f(
                    &kernel,
                    &h,
                    y,
                    &|_| 1.0,
                    &Region::outer(delta),
                    Orders::new(0.0, 0.0),
                )?;
                Ok([b, kappa, small, big])
            })
            .collect::<Result<Vec<_>>>()?;
        let table = JumpTable {
            y0: y_lo,
            dy,
            drift: rows.iter().map(|r| r[0]).collect(),
            big_compensator: rows.iter().map(|r| r[1]).collect(),
            small_variance: rows.iter().map(|r| r[2]).collect(),
            big_mass: rows.iter().map(|r| r[3]).collect(),
        };
        let sup_big = table.big_mass.iter().fold(0.0f64, |m, v| m.max(*v));
        let (proposal, natural) = match &kernel.variant {
            KernelVariant::StableTail { gamma, scale } => {
                let w_min = delta / h.max_hprime();
                let mass = 2.0 * scale * w_min.powf(-gamma) / gamma;
                (
                    Proposal::StableTail {
                        gamma: *gamma,
                        w_min,
                        mass,
                    },
                    mass,
                )
            }
            KernelVariant::FiniteActivity {
                rate_max,
                law: JumpLaw::Normal { .. },
                ..
            } => (Proposal::Law, *rate_max),
            _ => (Proposal::Atoms, (1.25 * sup_big).max(f64::MIN_POSITIVE)),
        };
        let intensity_bound = config.intensity_bound.unwrap_or(natural);
        if sup_big > intensity_bound * (1.0 + 1e-12) {
            return Err(LabError::IntensityBoundViolated {
                rate: sup_big,
                bound: intensity_bound,
            });
        }
        Ok(Self {
            h,
            diffusion: dynamics.coeffs.diffusion.clone(),
            kernel,
            truncation: k,
            delta,
            intensity_bound,
            table: Some(table),
            proposal,
        })
    }

    fn to_x(&self, y: f64) -> Result<f64> {
        if self.h.is_identity() {
            Ok(y)
        } else {
            self.h.inverse(y)
        }
    }

    pub fn sigma0(&self, y: f64) -> Result<f64> {
        let x = self.to_x(y)?;
        Ok(self.diffusion.eval(x) * self.h.hprime_ext(x))
    }

    pub fn b(&self, y: f64) -> f64 {
        self.table.as_ref().map_or(0.0, |t| t.interp(&t.drift, y))
    }

    pub fn big_compensator(&self, y: f64) -> f64 {
        self.table
            .as_ref()
            .map_or(0.0, |t| t.interp(&t.big_compensator, y))
    }

    pub fn small_variance(&self, y: f64) -> f64 {
        self.table
            .as_ref()
            .map_or(0.0, |t| t.interp(&t.small_variance, y))
    }

    pub fn big_mass(&self, y: f64) -> f64 {
        self.table
            .as_ref()
            .map_or(0.0, |t| t.interp(&t.big_mass, y))
    }

    /// One thinned candidate at pre-jump state `y`: `Some((w, z))` when accepted.
    fn candidate(&self, y: f64, rng: &mut ChaCha8Rng) -> Result<Option<(f64, f64)>> {
        let x = self.to_x(y)?;
        let lambda = self.intensity_bound;
        let violated = |rate: f64| LabError::IntensityBoundViolated {
            rate,
            bound: lambda,
        };
        match self.proposal {
            Proposal::None => Ok(None),
            Proposal::Atoms => {
                let atoms: Vec<(f64, f64, f64)> = self
                    .kernel
                    .atoms_at(x)
                    .unwrap_or_default()
                    .into_iter()
                    .map(|(w, m)| (w, self.h.increment(x, w), m))
                    .filter(|(_, z, m)| z.abs() > self.delta && *m > 0.0)
                    .collect();
                let total: f64 = atoms.iter().map(|a| a.2).sum();
                if total > lambda * (1.0 + 1e-12) {
                    return Err(violated(total));
                }
                if rng.random::<f64>() * lambda >= total {
                    return Ok(None);
                }
                let mut pick = rng.random::<f64>() * total;
                for &(w, z, m) in &atoms {
                    if pick < m {
                        return Ok(Some((w, z)));
                    }
                    pick -= m;
                }
                let last = atoms[atoms.len() - 1];
                Ok(Some((last.0, last.1)))
            }
            Proposal::Law => {
                let KernelVariant::FiniteActivity {
                    rate,
                    law: JumpLaw::Normal { mean, std_dev },
                    ..
                } = &self.kernel.variant
                else {
                    unreachable!("law proposals are built for normal laws only")
                };
                let r = rate(x);
                if r > lambda * (1.0 + 1e-12) {
                    return Err(violated(r));
                }
                let w: f64 = Normal::new(*mean, *std_dev).expect("validated").sample(rng);
                let accept = rng.random::<f64>() * lambda < r;
                let z = self.h.increment(x, w);
                Ok((accept && w != 0.0 && z.abs() > self.delta).then_some((w, z)))
            }
            Proposal::StableTail { gamma, w_min, mass } => {
                if mass > lambda * (1.0 + 1e-12) {
                    return Err(violated(mass));
                }
                if rng.random::<f64>() * lambda >= mass {
                    return Ok(None);
                }
                let u: f64 = 1.0 - rng.random::<f64>();
                let size = w_min * u.powf(-1.0 / gamma);
                let w = if rng.random::<bool>() { size } else { -size };
                let z = self.h.increment(x, w);
                Ok((z.abs() > self.delta && z.is_finite()).then_some((w, z)))
            }
        }
    }
}

/// A simulated jump. It happened during the step ending at `times[step + 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpMark {
    pub step: usize,
    pub y_before: f64,
    pub x_before: f64,
    /// Size in image coordinates.
    pub z: f64,
    /// Size in original coordinates.
    pub w: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplePath {
    pub id: usize,
    /// RNG stream index; together with the master seed it fixes the path.
    pub stream: u64,
    pub y: Vec<f64>,
    pub x: Vec<f64>,
    pub jumps: Vec<JumpMark>,
    /// Brownian increments `ΔW_i`.
    pub dw: Vec<f64>,
    /// Gaussian increments standing in for small jumps, if any.
    pub small_noise: Option<Vec<f64>>,
}

impl SamplePath {
    pub fn x_terminal(&self) -> f64 {
        self.x[self.x.len() - 1]
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Ensemble {
    pub config: SimConfig,
    pub times: Vec<f64>,
    pub paths: Vec<SamplePath>,
    /// Paths that left the tabulated range of `h`.
    pub excluded: Vec<usize>,
}

impl Ensemble {
    pub fn dt(&self) -> f64 {
        self.config.dt()
    }

    pub fn terminal_values(&self) -> Vec<f64> {
        self.paths.iter().map(|p| p.x_terminal()).collect()
    }

    /// CSV with columns `path_id,t,Y,X,jump_flag,jump_size`; `jump_size` is
    /// the total jump of `X` during the step ending at `t`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "path_id,t,Y,X,jump_flag,jump_size")?;
        for p in &self.paths {
            let mut sizes = vec![0.0; self.times.len()];
            let mut flags = vec![false; self.times.len()];
            for m in &p.jumps {
                sizes[m.step + 1] += m.w;
                flags[m.step + 1] = true;
            }
            for i in 0..self.times.len() {
                writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    p.id,
                    self.times[i],
                    p.y[i],
                    p.x[i],
                    u8::from(flags[i]),
                    sizes[i]
                )?;
            }
        }
        Ok(())
    }

    pub fn summary(&self) -> EnsembleSummary {
        let xt = self.terminal_values();
        EnsembleSummary {
            n_paths: self.paths.len(),
            excluded: self.excluded.len(),
            mean_x_terminal: mean_se(&xt),
            var_x_terminal: variance_se(&xt),
            mean_jumps_per_path: mean(
                &self
                    .paths
                    .iter()
                    .map(|p| p.jumps.len() as f64)
                    .collect::<Vec<_>>(),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub n_paths: usize,
    pub excluded: usize,
    pub mean_x_terminal: MeanSe,
    pub var_x_terminal: MeanSe,
    pub mean_jumps_per_path: f64,
}

fn collect_paths(config: &SimConfig, results: Vec<Result<SamplePath>>) -> Result<Ensemble> {
    let mut paths = Vec::with_capacity(results.len());
    let mut excluded = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(p) => paths.push(p),
            Err(LabError::RangeError { .. }) => excluded.push(i),
            Err(e) => return Err(e),
        }
    }
    // More than 1% of paths leaving the table would bias every statistic.
    if excluded.len() * 100 > config.n_paths {
        return Err(LabError::TooManyExclusions {
            excluded: excluded.len(),
            total: config.n_paths,
        });
    }
    Ok(Ensemble {
        config: config.clone(),
        times: config.times(),
        paths,
        excluded,
    })
}

/// Euler scheme for `Y` started at `h(x0)`; `H̄` is `functional` read on
/// `h^{-1}(Y)`.
pub fn simulate_y(
    chars: &CharacteristicsY,
    functional: &PathFunctionalH,
    config: &SimConfig,
) -> Result<Ensemble> {
    functional.validate()?;
    config.validate(&chars.truncation)?;
    let y0 = if chars.h.is_identity() {
        config.x0
    } else {
        chars.h.h(config.x0)?
    };
    let results: Vec<Result<SamplePath>> = (0..config.n_paths)
        .into_par_iter()
        .map(|id| simulate_one_y(chars, functional, config, id, y0))
        .collect();
    collect_paths(config, results)
}

fn simulate_one_y(
    chars: &CharacteristicsY,
    functional: &PathFunctionalH,
    config: &SimConfig,
    id: usize,
    y0: f64,
) -> Result<SamplePath> {
    let mut rng = config.path_rng(id);
    let n = config.n_steps;
    let dt = config.dt();
    let sqdt = dt.sqrt();
    let gaussian_small =
        config.small_jump_mode == SmallJumpMode::GaussianMatch && !chars.kernel.is_empty();
    let candidates = (chars.intensity_bound > 0.0)
        .then(|| Poisson::new(chars.intensity_bound * dt).expect("positive rate"));
    let mut tracker = functional.tracker();
    let mut y = Vec::with_capacity(n + 1);
    let mut x = Vec::with_capacity(n + 1);
    let mut dw = Vec::with_capacity(n);
    let mut small_noise = gaussian_small.then(|| Vec::with_capacity(n));
    let mut jumps = Vec::new();
    let mut yc = y0;
    let mut xc = chars.to_x(yc)?;
    y.push(yc);
    x.push(xc);
    for step in 0..n {
        let hbar = tracker.push(xc);
        let s0 = chars.sigma0(yc)?;
        let g: f64 = rng.sample(StandardNormal);
        let d_w = g * sqdt;
        let mut next = yc + (chars.b(yc) + s0 * hbar - chars.big_compensator(yc)) * dt + s0 * d_w;
        if let Some(noise) = small_noise.as_mut() {
            let e: f64 = rng.sample(StandardNormal);
            let inc = (chars.small_variance(yc) * dt).sqrt() * e;
            noise.push(inc);
            next += inc;
        }
        dw.push(d_w);
        if let Some(pois) = &candidates {
            let count = pois.sample(&mut rng) as usize;
            for _ in 0..count {
                if let Some((w, z)) = chars.candidate(next, &mut rng)? {
                    jumps.push(JumpMark {
                        step,
                        y_before: next,
                        x_before: chars.to_x(next)?,
                        z,
                        w,
                    });
                    next += z;
                }
            }
        }
        yc = next;
        xc = chars.to_x(yc)?;
        y.push(yc);
        x.push(xc);
    }
    Ok(SamplePath {
        id,
        stream: id as u64,
        y,
        x,
        jumps,
        dw,
        small_noise,
    })
}

/// Simulates `X` through `Y = h(X)` with `H̄ ≡ 0`.
pub fn simulate_x_markovian(dynamics: &Dynamics, config: &SimConfig) -> Result<Ensemble> {
    let chars = CharacteristicsY::from_dynamics(dynamics, config)?;
    simulate_y(&chars, &PathFunctionalH::Zero, config)
}

/// Euler scheme `dX = (β'(X) + σ(X) H) dt + σ(X) dW` without jumps, for
/// drifts that are genuine functions.
pub fn simulate_direct_euler(
    coeffs: &CoefficientSet,
    functional: &PathFunctionalH,
    config: &SimConfig,
) -> Result<Ensemble> {
    let beta_prime = coeffs.drift.beta_prime.clone().ok_or_else(|| {
        LabError::validation(format!(
            "direct Euler needs a pointwise drift derivative, {} has none",
            coeffs.drift.name
        ))
    })?;
    config.validate(&TruncationFunction::default())?;
    functional.validate()?;
    let dt = config.dt();
    let sqdt = dt.sqrt();
    let results: Vec<Result<SamplePath>> = (0..config.n_paths)
        .into_par_iter()
        .map(|id| {
            let mut rng = config.path_rng(id);
            let mut tracker = functional.tracker();
            let mut x = Vec::with_capacity(config.n_steps + 1);
            let mut dw = Vec::with_capacity(config.n_steps);
            let mut xc = config.x0;
            x.push(xc);
            for _ in 0..config.n_steps {
                let hv = tracker.push(xc);
                let s = coeffs.diffusion.eval(xc);
                let g: f64 = rng.sample(StandardNormal);
                let d_w = g * sqdt;
                xc += (beta_prime(xc) + s * hv) * dt + s * d_w;
                dw.push(d_w);
                x.push(xc);
            }
            Ok(SamplePath {
                id,
                stream: id as u64,
                y: x.clone(),
                x,
                jumps: Vec::new(),
                dw,
                small_noise: None,
            })
        })
        .collect();
    collect_paths(config, results)
}

#[derive(Debug, Clone, Serialize)]
pub struct GirsanovWeight {
    pub log_kappa: Vec<f64>,
    pub kappa_terminal: f64,
}

/// `log κ_{i+1} = log κ_i + H(t_i, X⁻) ΔW_i - ½ H(t_i, X⁻)² Δt`.
pub fn girsanov_weight(path: &SamplePath, functional: &PathFunctionalH, dt: f64) -> GirsanovWeight {
    let mut tracker = functional.tracker();
    let mut log_kappa = Vec::with_capacity(path.dw.len() + 1);
    let mut acc = 0.0;
    log_kappa.push(acc);
    for (i, &d_w) in path.dw.iter().enumerate() {
        let hv = tracker.push(path.x[i]);
        acc += hv * d_w - 0.5 * hv * hv * dt;
        log_kappa.push(acc);
    }
    GirsanovWeight {
        kappa_terminal: acc.exp(),
        log_kappa,
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WeightedEstimate {
    pub estimate: MeanSe,
    pub effective_sample_size: f64,
}

/// `Σ κ_T g / n` with its standard error.
pub fn weighted_expectation(
    ensemble: &Ensemble,
    weights: &[f64],
    g: impl Fn(&SamplePath) -> f64,
) -> Result<WeightedEstimate> {
    if weights.len() != ensemble.paths.len() {
        return Err(LabError::validation(format!(
            "{} weights for {} paths",
            weights.len(),
            ensemble.paths.len()
        )));
    }
    let sum: f64 = weights.iter().sum();
    let sum_sq: f64 = weights.iter().map(|w| w * w).sum();
    let ess = if sum_sq > 0.0 {
        sum * sum / sum_sq
    } else {
        0.0
    };
    if ess < 10.0 {
        return Err(LabError::DegenerateWeights { ess });
    }
    let values: Vec<f64> = ensemble
        .paths
        .iter()
        .zip(weights)
        .map(|(p, w)| w * g(p))
        .collect();
    Ok(WeightedEstimate {
        estimate: mean_se(&values),
        effective_sample_size: ess,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompensatorResidual {
    pub counts: MeanSe,
    pub compensator: MeanSe,
    pub residual: MeanSe,
}

/// Per path `N_T(A) - Σ_i Q(X_{t_i}, A) Δt` for a region `A` of jump sizes
/// of `X` bounded away from 0.
pub fn compensator_residual(
    ensemble: &Ensemble,
    region: &Region,
    kernel: &JumpKernelSpec,
) -> Result<CompensatorResidual> {
    let touches_zero = [region.pos, region.neg]
        .iter()
        .flatten()
        .any(|b| b.lo <= 0.0);
    if touches_zero {
        return Err(LabError::validation(
            "compensator region must stay away from 0",
        ));
    }
    let dt = ensemble.dt();
    let constant = if kernel.is_state_independent() {
        Some(kernel.mass(0.0, region)?)
    } else {
        None
    };
    let rows = ensemble
        .paths
        .par_iter()
        .map(|p| -> Result<(f64, f64)> {
            let count = p.jumps.iter().filter(|m| region.contains(m.w)).count() as f64;
            let comp = match constant {
                Some(c) => c * dt * (p.x.len() - 1) as f64,
                None => {
                    let mut acc = 0.0;
                    for &x in &p.x[..p.x.len() - 1] {
                        acc += kernel.mass(x, region)? * dt;
                    }
                    acc
                }
            };
            Ok((count, comp))
        })
        .collect::<Result<Vec<_>>>()?;
    let counts: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let comps: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let resid: Vec<f64> = rows.iter().map(|r| r.0 - r.1).collect();
    Ok(CompensatorResidual {
        counts: mean_se(&counts),
        compensator: mean_se(&comps),
        residual: mean_se(&resid),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecompositionLevel {
    pub n: usize,
    /// Ensemble mean of `∫_0^T L f_N(X_s) ds`.
    pub terminal: MeanSe,
    /// Mean over paths of `sup_t |I_N(t) - I_{N_prev}(t)|`; absent on the first level.
    pub gap_to_previous: Option<f64>,
    /// Mean over paths of `sup_t |I_N(t) - ∫_0^t β'(X_s) ds|` when `β'` is known.
    pub gap_to_limit: Option<f64>,
}

/// Stabilization of `∫_0^t L f_N(X_s) ds` along the approximants `f_N → Id`.
pub fn canonical_decomposition_residual(
    ensemble: &Ensemble,
    coeffs: &CoefficientSet,
    ladder: &[usize],
) -> Result<Vec<DecompositionLevel>> {
    let dt = ensemble.dt();
    let target = C1Function::identity();
    let mut prev: Option<Vec<Vec<f64>>> = None;
    let mut out = Vec::with_capacity(ladder.len());
    let limit: Option<Vec<Vec<f64>>> = coeffs.drift.beta_prime.as_ref().map(|bp| {
        ensemble
            .paths
            .iter()
            .map(|p| cumulative(p.x.iter().map(|&x| bp(x)), dt))
            .collect()
    });
    for &n in ladder {
        let approx = make_test_function_sequence(&target, &coeffs.h, &coeffs.diffusion, n)?;
        let integrals = ensemble
            .paths
            .par_iter()
            .map(|p| -> Result<Vec<f64>> {
                let lf =
                    p.x.iter()
                        .map(|&x| approx.lf_at(x))
                        .collect::<Result<Vec<_>>>()?;
                Ok(cumulative(lf.into_iter(), dt))
            })
            .collect::<Result<Vec<_>>>()?;
        let terminal = mean_se(&integrals.iter().map(|v| v[v.len() - 1]).collect::<Vec<_>>());
        let gap_to_previous = prev.as_ref().map(|pv| mean_sup_gap(&integrals, pv));
        let gap_to_limit = limit.as_ref().map(|lv| mean_sup_gap(&integrals, lv));
        out.push(DecompositionLevel {
            n,
            terminal,
            gap_to_previous,
            gap_to_limit,
        });
        prev = Some(integrals);
    }
    Ok(out)
}

/// Left-endpoint running integral on the grid.
fn cumulative(values: impl Iterator<Item = f64>, dt: f64) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out = vec![0.0];
    let v: Vec<f64> = values.collect();
    for &f in &v[..v.len() - 1] {
        acc += f * dt;
        out.push(acc);
    }
    out
}

fn mean_sup_gap(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let sups: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(u, v)| {
            u.iter()
                .zip(v)
                .map(|(p, q)| (p - q).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    mean(&sups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{symmetric_grid, DriftSpec, SigmaFunction};
    use crate::kernels::TruncationRule;

    fn brownian(kernel: JumpKernelSpec, truncation: TruncationFunction) -> Dynamics {
        Dynamics {
            coeffs: CoefficientSet::brownian(1.0, 60.0),
            kernel,
            truncation,
        }
    }

    fn config(n_paths: usize, n_steps: usize, seed: u64) -> SimConfig {
        SimConfig {
            n_paths,
            n_steps,
            master_seed: seed,
            ..SimConfig::default()
        }
    }

    #[test]
    fn brownian_terminal_variance() {
        let d = brownian(JumpKernelSpec::empty(), TruncationFunction::default());
        let e = simulate_x_markovian(&d, &config(10_000, 50, 11)).unwrap();
        let v = e.summary().var_x_terminal;
        assert!(v.within(1.0, 3.0), "{v:?}");
        assert!(e.excluded.is_empty());
    }

    #[test]
    fn poisson_counts_for_unit_atom() {
        let k = TruncationFunction {
            radius: 0.5,
            rule: TruncationRule::Indicator,
        };
        let mut d = brownian(JumpKernelSpec::atoms(1.0, vec![(1.0, 1.0)]), k);
        d.coeffs.diffusion = DiffusionSpec::constant(0.0);
        let mut cfg = config(10_000, 20, 3);
        cfg.small_jump_mode = SmallJumpMode::Drop;
        let e = simulate_x_markovian(&d, &cfg).unwrap();
        let xt = e.terminal_values();
        assert!(xt.iter().all(|v| v.fract() == 0.0));
        let m = mean_se(&xt);
        assert!(m.within(1.0, 3.0), "{m:?}");
        let v = variance_se(&xt);
        assert!(v.within(1.0, 3.0), "{v:?}");
    }

    #[test]
    fn reruns_are_bit_identical() {
        let d = brownian(
            JumpKernelSpec::stable(1.5, 0.5, 1.0),
            TruncationFunction::default(),
        );
        let cfg = config(1, 64, 99);
        let a = simulate_x_markovian(&d, &cfg).unwrap();
        let b = simulate_x_markovian(&d, &cfg).unwrap();
        assert_eq!(a.paths[0].x, b.paths[0].x);
        assert_eq!(a.paths[0].jumps, b.paths[0].jumps);
        let c = simulate_x_markovian(&d, &config(1, 64, 100)).unwrap();
        assert_ne!(a.paths[0].x, c.paths[0].x);
    }

    #[test]
    fn jump_marks_satisfy_pushforward_relation() {
        let grid = symmetric_grid(8.0, 1600);
        let sf = SigmaFunction::from_fn(grid, |x| 0.6 * x.clamp(-2.0, 2.0)).unwrap();
        let coeffs = CoefficientSet::from_sigma(
            DriftSpec::clamped_linear(0.3, -2.0, 2.0),
            DiffusionSpec::constant(1.0),
            sf,
        )
        .unwrap();
        let d = Dynamics {
            coeffs,
            kernel: JumpKernelSpec::atoms(2.0, vec![(0.7, 0.5), (-1.1, 0.5)]),
            truncation: TruncationFunction::default(),
        };
        let e = simulate_x_markovian(&d, &config(200, 50, 5)).unwrap();
        let h = &d.coeffs.h;
        let mut seen = 0;
        for p in &e.paths {
            for m in &p.jumps {
                let w = h.inverse(m.y_before + m.z).unwrap() - h.inverse(m.y_before).unwrap();
                assert!((w - m.w).abs() < 1e-8, "{w} vs {}", m.w);
                assert!(m.w == 0.7 || m.w == -1.1);
                seen += 1;
            }
            for (y, x) in p.y.iter().zip(&p.x) {
                assert!((h.h(*x).unwrap() - y).abs() < 1e-9);
            }
        }
        assert!(seen > 100);
    }

    #[test]
    fn intensity_bound_below_rate_is_rejected() {
        let d = brownian(
            JumpKernelSpec::atoms(2.0, vec![(1.0, 1.0)]),
            TruncationFunction::default(),
        );
        let mut cfg = config(10, 10, 0);
        cfg.intensity_bound = Some(1.0);
        assert!(matches!(
            simulate_x_markovian(&d, &cfg),
            Err(LabError::IntensityBoundViolated { .. })
        ));
    }

    #[test]
    fn cutoff_must_be_below_radius() {
        let d = brownian(JumpKernelSpec::empty(), TruncationFunction::default());
        let mut cfg = config(10, 10, 0);
        cfg.small_jump_cutoff = Some(1.5);
        assert!(matches!(
            simulate_x_markovian(&d, &cfg),
            Err(LabError::Validation(_))
        ));
    }

    #[test]
    fn escaping_paths_are_excluded_then_fail() {
        let d = Dynamics {
            coeffs: CoefficientSet::from_sigma(
                DriftSpec::linear(0.1),
                DiffusionSpec::constant(1.0),
                SigmaFunction::from_fn(symmetric_grid(1.0, 100), |x| 0.2 * x).unwrap(),
            )
            .unwrap(),
            kernel: JumpKernelSpec::empty(),
            truncation: TruncationFunction::default(),
        };
        let r = simulate_x_markovian(&d, &config(200, 50, 1));
        assert!(matches!(r, Err(LabError::TooManyExclusions { .. })));
    }

    #[test]
    fn zero_functional_gives_unit_weights() {
        let d = brownian(JumpKernelSpec::empty(), TruncationFunction::default());
        let e = simulate_x_markovian(&d, &config(20, 30, 2)).unwrap();
        for p in &e.paths {
            let g = girsanov_weight(p, &PathFunctionalH::Zero, e.dt());
            assert_eq!(g.kappa_terminal, 1.0);
            assert!(g.log_kappa.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn constant_functional_log_weight_moments() {
        let d = brownian(JumpKernelSpec::empty(), TruncationFunction::default());
        let e = simulate_x_markovian(&d, &config(10_000, 20, 8)).unwrap();
        let c = 0.6;
        let h = PathFunctionalH::Constant { value: c };
        let logs: Vec<f64> = e
            .paths
            .iter()
            .map(|p| *girsanov_weight(p, &h, e.dt()).log_kappa.last().unwrap())
            .collect();
        assert!(mean_se(&logs).within(-c * c / 2.0, 3.0));
        assert!(variance_se(&logs).within(c * c, 3.0));
    }

    #[test]
    fn degenerate_weights_are_reported() {
        let d = brownian(JumpKernelSpec::empty(), TruncationFunction::default());
        let e = simulate_x_markovian(&d, &config(20, 5, 2)).unwrap();
        let mut w = vec![0.0; 20];
        w[3] = 1.0;
        assert!(matches!(
            weighted_expectation(&e, &w, |_| 1.0),
            Err(LabError::DegenerateWeights { .. })
        ));
        let ones = vec![1.0; 20];
        let est = weighted_expectation(&e, &ones, |p| p.x_terminal()).unwrap();
        assert_eq!(est.estimate.mean, mean(&e.terminal_values()));
    }

    #[test]
    fn compensator_region_must_avoid_zero() {
        let d = brownian(JumpKernelSpec::empty(), TruncationFunction::default());
        let e = simulate_x_markovian(&d, &config(5, 5, 2)).unwrap();
        assert!(compensator_residual(&e, &Region::inner(1.0), &d.kernel).is_err());
        let r = compensator_residual(&e, &Region::outer(1.0), &d.kernel).unwrap();
        assert_eq!(r.residual.mean, 0.0);
    }

    #[test]
    fn zero_drift_gives_zero_decomposition() {
        let d = Dynamics {
            coeffs: CoefficientSet::brownian(1.0, 8.0),
            kernel: JumpKernelSpec::empty(),
            truncation: TruncationFunction::default(),
        };
        let e = simulate_x_markovian(&d, &config(20, 20, 4)).unwrap();
        let levels = canonical_decomposition_residual(&e, &d.coeffs, &[6, 12]).unwrap();
        for l in &levels {
            assert!(l.terminal.mean.abs() < 1e-12, "{:?}", l);
        }
    }

    #[test]
    fn csv_has_one_row_per_node() {
        let d = brownian(
            JumpKernelSpec::atoms(3.0, vec![(1.0, 1.0)]),
            TruncationFunction::default(),
        );
        let e = simulate_x_markovian(&d, &config(2, 4, 0)).unwrap();
        let mut buf = Vec::new();
        e.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 5);
        assert!(text.starts_with("path_id,t,Y,X,jump_flag,jump_size\n"));
    }
}
