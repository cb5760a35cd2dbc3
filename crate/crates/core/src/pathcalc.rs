//! Pathwise calculus on grid paths: the regularized quadratic variation,
//! covariations, the C¹ chain rule for quadratic variation, and the
//! Dirichlet-property diagnostics.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::C1Function;
use crate::error::{LabError, Result};
use crate::generator::Dynamics;
use crate::kernels::{pushforward_f_lenient, JumpKernelSpec, Orders, Region};
use crate::simulator::{Ensemble, SamplePath};
use crate::stats::mean_se;

/// A jump of `X` recorded during the step ending at grid index `step + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathJump {
    pub step: usize,
    pub x_before: f64,
    pub size: f64,
}

/// Path on the uniform grid `t_i = i dt`, with known jumps.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPath {
    pub dt: f64,
    pub values: Vec<f64>,
    pub jumps: Vec<PathJump>,
}

impl GridPath {
    pub fn new(dt: f64, values: Vec<f64>) -> Result<Self> {
        if !(dt > 0.0) || values.len() < 2 {
            return Err(LabError::validation(
                "grid path needs dt > 0 and at least two values",
            ));
        }
        Ok(Self {
            dt,
            values,
            jumps: Vec::new(),
        })
    }

    pub fn with_jumps(mut self, jumps: Vec<PathJump>) -> Self {
        self.jumps = jumps;
        self
    }

    pub fn from_sample(path: &SamplePath, dt: f64) -> Self {
        Self {
            dt,
            values: path.x.clone(),
            jumps: path
                .jumps
                .iter()
                .map(|m| PathJump {
                    step: m.step,
                    x_before: m.x_before,
                    size: m.w,
                })
                .collect(),
        }
    }

    pub fn horizon(&self) -> f64 {
        self.dt * (self.values.len() - 1) as f64
    }

    /// The path `φ(X)`, with jumps carried along.
    pub fn map(&self, phi: &dyn Fn(f64) -> f64) -> Self {
        Self {
            dt: self.dt,
            values: self.values.iter().map(|&x| phi(x)).collect(),
            jumps: self
                .jumps
                .iter()
                .map(|j| PathJump {
                    step: j.step,
                    x_before: phi(j.x_before),
                    size: phi(j.x_before + j.size) - phi(j.x_before),
                })
                .collect(),
        }
    }

    fn combine(&self, other: &Self, sign: f64) -> Result<Self> {
        check_same_grid(self, other)?;
        Ok(Self {
            dt: self.dt,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + sign * b)
                .collect(),
            jumps: Vec::new(),
        })
    }
}

fn check_same_grid(a: &GridPath, b: &GridPath) -> Result<()> {
    if a.values.len() != b.values.len() || (a.dt - b.dt).abs() > 1e-12 * a.dt {
        return Err(LabError::GridMismatch {
            value: b.dt,
            dt: a.dt,
        });
    }
    Ok(())
}

/// `round(value / dt)` when `value` is a grid multiple.
fn grid_steps(value: f64, dt: f64) -> Result<usize> {
    let r = value / dt;
    let n = r.round();
    if n < 0.0 || (r - n).abs() > 1e-9 * r.abs().max(1.0) {
        return Err(LabError::GridMismatch { value, dt });
    }
    Ok(n as usize)
}

/// `(1/ε) Σ_{t_i < t} (X_{(t_i+ε)∧t} - X_{t_i})² dt`.
pub fn qv_regularization(path: &GridPath, epsilon: f64, t: f64) -> Result<f64> {
    let m = grid_steps(epsilon, path.dt)?;
    let n = grid_steps(t, path.dt)?;
    if m == 0 || m >= n {
        return Err(LabError::validation(format!(
            "need 0 < epsilon < t, got epsilon={epsilon}, t={t}"
        )));
    }
    if n >= path.values.len() {
        return Err(LabError::RangeError {
            what: "t",
            value: t,
            lo: 0.0,
            hi: path.horizon(),
        });
    }
    let x = &path.values;
    let sum: f64 = (0..n)
        .map(|i| {
            let d = x[(i + m).min(n)] - x[i];
            d * d
        })
        .sum();
    // dt / ε = 1/m exactly on the grid.
    Ok(sum / m as f64)
}

/// `¼ ([X+Y]^ε - [X-Y]^ε)`.
pub fn covariation(a: &GridPath, b: &GridPath, epsilon: f64, t: f64) -> Result<f64> {
    let plus = qv_regularization(&a.combine(b, 1.0)?, epsilon, t)?;
    let minus = qv_regularization(&a.combine(b, -1.0)?, epsilon, t)?;
    Ok(0.25 * (plus - minus))
}

/// `(1/ε) Σ (ΔX)(ΔY) dt`, the cross-sum form of [`covariation`].
pub fn covariation_direct(a: &GridPath, b: &GridPath, epsilon: f64, t: f64) -> Result<f64> {
    check_same_grid(a, b)?;
    let m = grid_steps(epsilon, a.dt)?;
    let n = grid_steps(t, a.dt)?;
    if m == 0 || n >= a.values.len() {
        return Err(LabError::validation(
            "epsilon must be positive and t inside the path",
        ));
    }
    let (x, y) = (&a.values, &b.values);
    let sum: f64 = (0..n)
        .map(|i| {
            let j = (i + m).min(n);
            (x[j] - x[i]) * (y[j] - y[i])
        })
        .sum();
    Ok(sum / m as f64)
}

/// `{0.1, 0.05, 0.025, 0.0125} T`.
pub fn default_epsilon_ladder(horizon: f64) -> Vec<f64> {
    [0.1, 0.05, 0.025, 0.0125]
        .iter()
        .map(|f| f * horizon)
        .collect()
}

/// [`default_epsilon_ladder`] with each rung rounded to the nearest whole
/// number of steps (at least one).
pub fn grid_epsilon_ladder(horizon: f64, n_steps: usize) -> Vec<f64> {
    let dt = horizon / n_steps as f64;
    default_epsilon_ladder(horizon)
        .into_iter()
        .map(|e| (e / dt).round().max(1.0) * dt)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QVEstimate {
    pub t: f64,
    pub epsilons: Vec<f64>,
    pub values: Vec<f64>,
    /// `Σ_{s<=t} (ΔX_s)²` from the recorded jumps.
    pub jump_sum: f64,
    /// Finest-ε value minus the jump sum, floored at 0.
    pub continuous_part: f64,
}

impl QVEstimate {
    pub fn finest(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    /// CSV with columns `epsilon,t,value`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "epsilon,t,value")?;
        for (e, v) in self.epsilons.iter().zip(&self.values) {
            writeln!(out, "{e},{},{v}", self.t)?;
        }
        Ok(())
    }
}

/// `[X, X]^ε_t` along a ladder of ε, ordered from coarse to fine.
pub fn qv_ladder(path: &GridPath, epsilons: &[f64], t: f64) -> Result<QVEstimate> {
    let mut eps = epsilons.to_vec();
    eps.sort_by(|a, b| b.total_cmp(a));
    let values = eps
        .iter()
        .map(|&e| qv_regularization(path, e, t))
        .collect::<Result<Vec<_>>>()?;
    let n = grid_steps(t, path.dt)?;
    let jump_sum: f64 = path
        .jumps
        .iter()
        .filter(|j| j.step < n)
        .map(|j| j.size * j.size)
        .sum();
    let finest = values.last().copied().unwrap_or(0.0);
    Ok(QVEstimate {
        t,
        epsilons: eps,
        values,
        jump_sum,
        continuous_part: (finest - jump_sum).max(0.0),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainRuleQv {
    /// `∫ φ'(X_{s-})² d[X,X]^c + Σ (φ(X_{s-} + ΔX_s) - φ(X_{s-}))²`
    pub predicted: f64,
    /// `[φ(X), φ(X)]^ε_t` per ε, coarse to fine.
    pub epsilons: Vec<f64>,
    pub estimated: Vec<f64>,
}

impl ChainRuleQv {
    pub fn finest(&self) -> f64 {
        self.estimated[self.estimated.len() - 1]
    }
}

/// Quadratic variation of `φ(X)`: predicted from the path's continuous
/// increments and jumps versus regularized directly.
///
/// Continuous increments are the grid increments with recorded jumps
/// removed, so `d[X,X]^c` is read off the path at grid resolution.
pub fn chain_rule_qv(
    phi: &C1Function,
    path: &GridPath,
    epsilons: &[f64],
    t: f64,
) -> Result<ChainRuleQv> {
    let n = grid_steps(t, path.dt)?;
    if n >= path.values.len() {
        return Err(LabError::RangeError {
            what: "t",
            value: t,
            lo: 0.0,
            hi: path.horizon(),
        });
    }
    let mut jump_in_step = vec![0.0; n];
    let mut jump_part = 0.0;
    for j in path.jumps.iter().filter(|j| j.step < n) {
        jump_in_step[j.step] += j.size;
        let d = (phi.value)(j.x_before + j.size) - (phi.value)(j.x_before);
        jump_part += d * d;
    }
    let x = &path.values;
    let continuous: f64 = (0..n)
        .map(|i| {
            let dc = x[i + 1] - x[i] - jump_in_step[i];
            let d = (phi.derivative)(x[i]);
            d * d * dc * dc
        })
        .sum();
    let mapped = path.map(&|v| (phi.value)(v));
    let ladder = qv_ladder(&mapped, epsilons, t)?;
    Ok(ChainRuleQv {
        predicted: continuous + jump_part,
        epsilons: ladder.epsilons,
        estimated: ladder.values,
    })
}

/// Per path `Σ_{s<=T} |φ(X_{s-} + ΔX_s) - φ(X_{s-})| 1_{a < |ΔX_s| <= cap}`.
pub fn big_jump_variation(
    paths: &[GridPath],
    phi: &dyn Fn(f64) -> f64,
    a: f64,
    cap: f64,
) -> Vec<f64> {
    paths
        .iter()
        .map(|p| {
            p.jumps
                .iter()
                .filter(|j| j.size.abs() > a && j.size.abs() <= cap)
                .map(|j| (phi(j.x_before + j.size) - phi(j.x_before)).abs())
                .sum()
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrowthRow {
    pub n: usize,
    /// Jumps above the cap are left out; `None` means uncapped.
    pub cap: Option<f64>,
    pub mean: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrowthTable {
    pub a: f64,
    /// Means over the first `n` paths, uncapped.
    pub by_sample_size: Vec<GrowthRow>,
    /// Means over all paths with jumps above `cap` left out.
    pub by_cap: Vec<GrowthRow>,
    /// Ratio of the two largest-cap means.
    pub last_cap_growth: f64,
    pub diverging: bool,
}

/// Cap-ladder growth above which the truncated means count as diverging.
pub const DIVERGENCE_GROWTH: f64 = 1.5;

/// Growth of the big-jump variation of `φ(X)`. Nested caps make the
/// capped means nondecreasing; a finite limit shows up as a flat top.
/// This is a diagnostic for local integrability, never a proof.
pub fn dirichlet_condition_int_y(
    phi: &dyn Fn(f64) -> f64,
    paths: &[GridPath],
    a: f64,
    sample_sizes: &[usize],
    caps: &[f64],
) -> Result<GrowthTable> {
    if !(a > 0.0) {
        return Err(LabError::validation("jump threshold a must be positive"));
    }
    let uncapped = big_jump_variation(paths, phi, a, f64::INFINITY);
    let by_sample_size = sample_sizes
        .iter()
        .filter(|&&n| n > 0 && n <= paths.len())
        .map(|&n| {
            let m = mean_se(&uncapped[..n]);
            GrowthRow {
                n,
                cap: None,
                mean: m.mean,
                se: m.se,
            }
        })
        .collect();
    let mut caps = caps.to_vec();
    caps.sort_by(f64::total_cmp);
    let by_cap: Vec<GrowthRow> = caps
        .iter()
        .map(|&cap| {
            let m = mean_se(&big_jump_variation(paths, phi, a, cap));
            GrowthRow {
                n: paths.len(),
                cap: Some(cap),
                mean: m.mean,
                se: m.se,
            }
        })
        .collect();
    let last_cap_growth = match by_cap.len() {
        0 | 1 => 1.0,
        k => {
            let (lo, hi) = (by_cap[k - 2].mean, by_cap[k - 1].mean);
            if lo > 0.0 {
                hi / lo
            } else if hi > 0.0 {
                f64::INFINITY
            } else {
                1.0
            }
        }
    };
    Ok(GrowthTable {
        a,
        by_sample_size,
        by_cap,
        last_cap_growth,
        diverging: last_cap_growth > DIVERGENCE_GROWTH,
    })
}

/// Nodes of the compensator-rate table used by [`gamma_paths`].
const COMPENSATOR_NODES: usize = 129;

/// `Γ(φ) = φ(X) - φ(x0) - ∫ φ'(X) dX^c - (Σ jumps of φ(X) - compensator)`,
/// per path on the grid. `dX^c = σ(X) dW` plus any Gaussian small-jump
/// stand-in recorded by the simulator. `tail_order` is the growth order of
/// `φ` at infinity, used to reject divergent compensators up front.
pub fn gamma_paths(
    ensemble: &Ensemble,
    phi: &C1Function,
    dynamics: &Dynamics,
    tail_order: f64,
) -> Result<Vec<GridPath>> {
    let (coeffs, kernel) = (&dynamics.coeffs, &dynamics.kernel);
    let dt = ensemble.dt();
    let delta = ensemble.config.cutoff(&dynamics.truncation);
    let h = &coeffs.h;
    let to_y = |x: f64| if h.is_identity() { Ok(x) } else { h.h(x) };
    let rate = |y: f64| -> Result<f64> {
        let x = h.inverse_ext(y);
        let phix = (phi.value)(x);
        let g = |z: f64| (phi.value)(h.inverse_ext(y + z)) - phix;
        // Oscillating φ against a heavy tail cannot meet the strict
        // tolerance; the leftover is far below the Monte Carlo noise.
        pushforward_f_lenient(
            kernel,
            h,
            y,
            &g,
            &Region::outer(delta),
            Orders::new(1.0, tail_order),
        )
        .map(|(v, _)| v)
    };
    // The compensator rate depends on the state only, so tabulate it over
    // the visited range and interpolate.
    let table = if kernel.is_empty() {
        None
    } else {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for p in &ensemble.paths {
            for &x in &p.x[..p.x.len() - 1] {
                let y = to_y(x)?;
                lo = lo.min(y);
                hi = hi.max(y);
            }
        }
        let nodes: Vec<f64> = if hi > lo {
            (0..COMPENSATOR_NODES)
                .map(|i| lo + (hi - lo) * i as f64 / (COMPENSATOR_NODES - 1) as f64)
                .collect()
        } else {
            vec![lo]
        };
        let values = nodes
            .par_iter()
            .map(|&y| rate(y))
            .collect::<Result<Vec<_>>>()?;
        Some((nodes, values))
    };
    let interp = |y: f64| -> f64 {
        let Some((nodes, values)) = &table else {
            return 0.0;
        };
        if nodes.len() == 1 {
            return values[0];
        }
        let step = nodes[1] - nodes[0];
        let s = ((y - nodes[0]) / step).clamp(0.0, (nodes.len() - 1) as f64);
        let i = (s.floor() as usize).min(nodes.len() - 2);
        let f = s - i as f64;
        values[i] * (1.0 - f) + values[i + 1] * f
    };
    ensemble
        .paths
        .iter()
        .map(|p| {
            let n = p.x.len() - 1;
            if p.dw.len() != n {
                return Err(LabError::MissingDriverRecord(format!(
                    "path {} has {} Brownian increments for {} steps",
                    p.id,
                    p.dw.len(),
                    n
                )));
            }
            let mut jump_in_step = vec![0.0; n];
            for m in &p.jumps {
                jump_in_step[m.step] += (phi.value)(m.x_before + m.w) - (phi.value)(m.x_before);
            }
            let phi0 = (phi.value)(p.x[0]);
            let mut values = Vec::with_capacity(n + 1);
            values.push(0.0);
            let (mut mart, mut jumps, mut comp) = (0.0, 0.0, 0.0);
            for i in 0..n {
                let x = p.x[i];
                let mut dxc = coeffs.diffusion.eval(x) * p.dw[i];
                if let Some(noise) = &p.small_noise {
                    // The stand-in acts on Y; map it to X through 1/h'.
                    dxc += noise[i] / h.hprime_ext(x);
                }
                mart += (phi.derivative)(x) * dxc;
                jumps += jump_in_step[i];
                comp += interp(to_y(x)?) * dt;
                values.push((phi.value)(p.x[i + 1]) - phi0 - mart - (jumps - comp));
            }
            GridPath::new(dt, values)
        })
        .collect()
}

/// Ensemble-mean quadratic variation of `Γ(φ)` along the ε ladder.
pub fn gamma_residual_qv(
    ensemble: &Ensemble,
    phi: &C1Function,
    dynamics: &Dynamics,
    tail_order: f64,
    epsilons: &[f64],
) -> Result<QVEstimate> {
    let paths = gamma_paths(ensemble, phi, dynamics, tail_order)?;
    let t = ensemble.config.horizon;
    let ladders = paths
        .iter()
        .map(|p| qv_ladder(p, epsilons, t))
        .collect::<Result<Vec<_>>>()?;
    let first = ladders
        .first()
        .ok_or_else(|| LabError::validation("gamma residual needs at least one path"))?;
    let k = first.values.len();
    let values: Vec<f64> = (0..k)
        .map(|j| ladders.iter().map(|l| l.values[j]).sum::<f64>() / ladders.len() as f64)
        .collect();
    Ok(QVEstimate {
        t,
        epsilons: first.epsilons.clone(),
        continuous_part: values[k - 1],
        values,
        jump_sum: 0.0,
    })
}

/// Time-atomic component declared for a compensator `Q(y, dx) dψ_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeclaredTimeAtoms {
    pub times: Vec<f64>,
    pub masses: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuJumpVerdict {
    /// The compensator charges no single time.
    Pass,
    /// Symmetric jump law: the first-moment condition survives time atoms.
    R1HoldsR1bisFails,
    R1Fails,
}

/// Compensators built here are `Q(y, dx) ds`, which never charge a single
/// time. A declared atomic time component is classified by the sign of
/// `∫ k(x) Q(0, dx)` (zero for symmetric kernels).
pub fn nu_jump_structural_check(
    kernel: &JumpKernelSpec,
    declared: Option<&DeclaredTimeAtoms>,
) -> Result<NuJumpVerdict> {
    let Some(atoms) = declared else {
        return Ok(NuJumpVerdict::Pass);
    };
    if atoms.masses.iter().all(|&m| m == 0.0) || kernel.is_empty() {
        return Ok(NuJumpVerdict::Pass);
    }
    let k = |x: f64| x.clamp(-1.0, 1.0);
    let first = kernel.integrate(0.0, &k, &Region::all(), Orders::new(1.0, 0.0))?;
    let scale = kernel.integrate(
        0.0,
        &|x: f64| k(x).abs(),
        &Region::all(),
        Orders::new(1.0, 0.0),
    )?;
    if first.abs() <= 1e-12 * scale.max(1.0) {
        Ok(NuJumpVerdict::R1HoldsR1bisFails)
    } else {
        Ok(NuJumpVerdict::R1Fails)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirichletVerdict {
    ConsistentWithDirichlet,
    Inconsistent,
    Inconclusive,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirichletReport {
    pub condition_int_y: GrowthTable,
    pub condition_nu_jump: NuJumpVerdict,
    pub gamma_qv: Option<QVEstimate>,
    pub noise_band: f64,
    pub verdict: DirichletVerdict,
    pub disclaimer: String,
}

/// Combines the diagnostics: inconsistent when the big-jump variation
/// diverges or the Γ quadratic variation stays above `noise_band` at every
/// ε; inconclusive when the Γ ladder is not decreasing.
pub fn dirichlet_report(
    condition_int_y: GrowthTable,
    condition_nu_jump: NuJumpVerdict,
    gamma_qv: Option<QVEstimate>,
    noise_band: f64,
) -> DirichletReport {
    let gamma_everywhere_large = gamma_qv
        .as_ref()
        .is_some_and(|g| g.values.iter().all(|&v| v > noise_band));
    let gamma_non_monotone = gamma_qv
        .as_ref()
        .is_some_and(|g| g.values.windows(2).any(|w| w[1] > w[0] + noise_band));
    let verdict = if condition_int_y.diverging
        || gamma_everywhere_large
        || condition_nu_jump == NuJumpVerdict::R1Fails
    {
        DirichletVerdict::Inconsistent
    } else if gamma_non_monotone {
        DirichletVerdict::Inconclusive
    } else {
        DirichletVerdict::ConsistentWithDirichlet
    };
    DirichletReport {
        condition_int_y,
        condition_nu_jump,
        gamma_qv,
        noise_band,
        verdict,
        disclaimer: "local integrability is not finitely observable; the growth table is evidence, not proof".into(),
    }
}
