//! Path-dependent generators on discretized càglàd paths, the registry of
//! drift functionals `H`, and martingale-problem residuals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coefficients::{eval_l, eval_l0, eval_sigma0, CoefficientSet, TestFunction};
use crate::error::{LabError, Result};
use crate::kernels::{
    drift_correction_b, jump_operator_ff, pushforward_f_lenient, JumpKernelSpec, Orders, Region,
    TruncationFunction,
};
use crate::stats::{mean_se, MeanSe};

/// A path known on a time grid. Values are the left limits `η(t_i)`.
#[derive(Debug, Clone, Copy)]
pub struct CaglapPathView<'a> {
    times: &'a [f64],
    values: &'a [f64],
}

impl<'a> CaglapPathView<'a> {
    pub fn new(times: &'a [f64], values: &'a [f64]) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return Err(LabError::validation(format!(
                "path needs matching nonempty times and values, got {} and {}",
                times.len(),
                values.len()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(LabError::validation(
                "path times must be strictly increasing",
            ));
        }
        Ok(Self { times, values })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &'a [f64] {
        self.times
    }

    pub fn value(&self, i: usize) -> f64 {
        self.values[i]
    }

    /// The path restricted to `[0, t_i]`. This is all a functional ever sees.
    pub fn past(&self, i: usize) -> PastView<'a> {
        PastView {
            times: &self.times[..=i],
            values: &self.values[..=i],
        }
    }

    /// `η^{t_i}` on the full grid: frozen at `η(t_i)` from `t_i` on.
    pub fn stopped(&self, i: usize) -> Vec<f64> {
        let mut v = self.values.to_vec();
        let frozen = v[i];
        v[i..].iter_mut().for_each(|x| *x = frozen);
        v
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PastView<'a> {
    times: &'a [f64],
    values: &'a [f64],
}

impl PastView<'_> {
    pub fn time(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    pub fn current(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    pub fn values(&self) -> &[f64] {
        self.values
    }
}

/// Bounded, non-anticipating drift functional `H(η)(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum PathFunctionalH {
    Zero,
    Constant {
        value: f64,
    },
    /// `clamp(scale * sup_{s<=t} η(s), -cap, cap)`
    RunningSupClamp {
        scale: f64,
        cap: f64,
    },
    /// `amplitude * sin(η(t))`
    SinCurrent {
        amplitude: f64,
    },
}

impl PathFunctionalH {
    pub fn name(&self) -> &'static str {
        match self {
            PathFunctionalH::Zero => "zero",
            PathFunctionalH::Constant { .. } => "constant",
            PathFunctionalH::RunningSupClamp { .. } => "running_sup_clamp",
            PathFunctionalH::SinCurrent { .. } => "sin_current",
        }
    }

    /// `||H||_∞`
    pub fn bound(&self) -> f64 {
        match self {
            PathFunctionalH::Zero => 0.0,
            PathFunctionalH::Constant { value } => value.abs(),
            PathFunctionalH::RunningSupClamp { cap, .. } => *cap,
            PathFunctionalH::SinCurrent { amplitude } => amplitude.abs(),
        }
    }

    /// Lipschitz constant with respect to the sup norm of the path.
    pub fn lipschitz(&self) -> f64 {
        match self {
            PathFunctionalH::Zero | PathFunctionalH::Constant { .. } => 0.0,
            PathFunctionalH::RunningSupClamp { scale, .. } => scale.abs(),
            PathFunctionalH::SinCurrent { amplitude } => amplitude.abs(),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, PathFunctionalH::Zero)
    }

    /// True when `H(η)(t)` depends on `η(t)` only.
    pub fn is_markovian(&self) -> bool {
        !matches!(self, PathFunctionalH::RunningSupClamp { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let finite = match self {
            PathFunctionalH::Zero => true,
            PathFunctionalH::Constant { value } => value.is_finite(),
            PathFunctionalH::RunningSupClamp { scale, cap } => {
                scale.is_finite() && cap.is_finite() && *cap >= 0.0
            }
            PathFunctionalH::SinCurrent { amplitude } => amplitude.is_finite(),
        };
        if finite {
            Ok(())
        } else {
            Err(LabError::validation(format!(
                "functional {} needs finite parameters",
                self.name()
            )))
        }
    }

    pub fn tracker(&self) -> HTracker {
        HTracker {
            functional: self.clone(),
            running_max: f64::NEG_INFINITY,
        }
    }

    pub fn eval(&self, past: &PastView<'_>) -> f64 {
        let mut t = self.tracker();
        let mut v = 0.0;
        for &x in past.values() {
            v = t.push(x);
        }
        v
    }
}

/// Evaluates `H` along a path fed one value at a time.
#[derive(Debug, Clone)]
pub struct HTracker {
    functional: PathFunctionalH,
    running_max: f64,
}

impl HTracker {
    /// Appends `η(t_i)` and returns `H(η)(t_i)`.
    pub fn push(&mut self, x: f64) -> f64 {
        self.running_max = self.running_max.max(x);
        match self.functional {
            PathFunctionalH::Zero => 0.0,
            PathFunctionalH::Constant { value } => value,
            PathFunctionalH::RunningSupClamp { scale, cap } => {
                (scale * self.running_max).clamp(-cap, cap)
            }
            PathFunctionalH::SinCurrent { amplitude } => amplitude * x.sin(),
        }
    }
}

/// Coefficients, jump kernel and truncation function of one model.
#[derive(Debug, Clone)]
pub struct Dynamics {
    pub coeffs: CoefficientSet,
    pub kernel: JumpKernelSpec,
    pub truncation: TruncationFunction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeneratorValue {
    pub local: f64,
    pub drift: f64,
    pub nonlocal: f64,
    pub total: f64,
}

impl GeneratorValue {
    fn new(local: f64, drift: f64, nonlocal: f64) -> Self {
        Self {
            local,
            drift,
            nonlocal,
            total: local + drift + nonlocal,
        }
    }
}

/// `𝓛f` at state `x` once `H(η)(t) = h_value` is known.
pub fn generator_at_state(
    f: &TestFunction,
    h_value: f64,
    dynamics: &Dynamics,
    x: f64,
) -> Result<GeneratorValue> {
    let h = &dynamics.coeffs.h;
    let diffusion = &dynamics.coeffs.diffusion;
    let local = eval_l(f, h, diffusion, x)?;
    let drift = if h_value == 0.0 {
        0.0
    } else {
        diffusion.eval(x) * h_value * f.f_prime(h, x)?
    };
    let nonlocal = jump_operator_ff(f, h, &dynamics.kernel, &dynamics.truncation, x)?.value;
    Ok(GeneratorValue::new(local, drift, nonlocal))
}

/// `𝓛f(η)(t_i)` for `f = φ ∘ h`.
pub fn eval_generator(
    f: &TestFunction,
    functional: &PathFunctionalH,
    dynamics: &Dynamics,
    path: &CaglapPathView<'_>,
    i: usize,
) -> Result<GeneratorValue> {
    let past = path.past(i);
    generator_at_state(f, functional.eval(&past), dynamics, past.current())
}

/// `𝓛̄φ(η̄)(t_i)` for a path `η̄` in image coordinates, with
/// `H̄(η̄) = H(h^{-1} ∘ η̄)`. The local part carries `L0 φ + b φ'`.
pub fn eval_transformed_generator(
    phi: &TestFunction,
    functional: &PathFunctionalH,
    dynamics: &Dynamics,
    path: &CaglapPathView<'_>,
    i: usize,
) -> Result<GeneratorValue> {
    let h = &dynamics.coeffs.h;
    let diffusion = &dynamics.coeffs.diffusion;
    let k = &dynamics.truncation;
    let past = path.past(i);
    let y = past.current();
    let dphi = (phi.phi_prime)(y);
    let b = drift_correction_b(&dynamics.kernel, h, k, y)?;
    let local = eval_l0(phi, h, diffusion, y)? + b * dphi;
    let hbar = {
        let xs = past
            .values()
            .iter()
            .map(|&v| h.inverse(v))
            .collect::<Result<Vec<_>>>()?;
        let mut t = functional.tracker();
        xs.iter().fold(0.0, |_, &x| t.push(x))
    };
    let drift = if hbar == 0.0 {
        0.0
    } else {
        eval_sigma0(h, diffusion, y)? * hbar * dphi
    };
    let nonlocal = if dynamics.kernel.is_empty() {
        0.0
    } else {
        let p = 1.0 + dynamics.kernel.alpha;
        let tail = if phi.bound.is_finite() { 0.0 } else { 1.0 };
        let py = (phi.phi)(y);
        let g = |z: f64| (phi.phi)(y + z) - py - k.eval(z) * dphi;
        pushforward_f_lenient(
            &dynamics.kernel,
            h,
            y,
            &g,
            &Region::all(),
            Orders::new(p, tail),
        )?
        .0
    };
    Ok(GeneratorValue::new(local, drift, nonlocal))
}

/// `|𝓛f(η)(t_i) - 𝓛̄φ(h ∘ η)(t_i)|` with `f = φ ∘ h`.
pub fn conjugation_residual(
    phi: &TestFunction,
    functional: &PathFunctionalH,
    dynamics: &Dynamics,
    path: &CaglapPathView<'_>,
    i: usize,
) -> Result<f64> {
    let h = &dynamics.coeffs.h;
    let direct = eval_generator(phi, functional, dynamics, path, i)?;
    let ys = path
        .past(i)
        .values()
        .iter()
        .map(|&x| h.h(x))
        .collect::<Result<Vec<_>>>()?;
    let image = CaglapPathView::new(&path.times()[..=i], &ys)?;
    let transformed = eval_transformed_generator(phi, functional, dynamics, &image, i)?;
    Ok((direct.total - transformed.total).abs())
}

/// `M^f_{t_i} = f(X_{t_i}) - f(X_0) - Σ_{j<i} 𝓛f(X⁻)(t_j) Δt_j`.
pub fn martingale_residual(
    times: &[f64],
    xs: &[f64],
    f: &TestFunction,
    functional: &PathFunctionalH,
    dynamics: &Dynamics,
) -> Result<Vec<f64>> {
    let path = CaglapPathView::new(times, xs)?;
    let h = &dynamics.coeffs.h;
    let f0 = f.f(h, xs[0])?;
    let mut tracker = functional.tracker();
    let mut out = Vec::with_capacity(path.len());
    out.push(0.0);
    let mut integral = 0.0;
    for j in 0..path.len() - 1 {
        let hv = tracker.push(xs[j]);
        integral += generator_at_state(f, hv, dynamics, xs[j])?.total * (times[j + 1] - times[j]);
        out.push(f.f(h, xs[j + 1])? - f0 - integral);
    }
    Ok(out)
}

/// Bounded functions of the past used to test the martingale property.
pub const PAST_TEST_FUNCTIONALS: [&str; 3] = ["clamp", "sin", "indicator_positive"];

fn past_test_functional(name: &str, x: f64) -> f64 {
    match name {
        "clamp" => x.clamp(-1.0, 1.0),
        "sin" => x.sin(),
        _ => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrthogonalityStat {
    pub functional: String,
    pub stat: MeanSe,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MartingaleCheck {
    pub test_function: String,
    /// Ensemble mean of `M^f_T`.
    pub terminal: MeanSe,
    /// Ensemble means of `(M^f_T - M^f_{t_mid}) g(X_{t_mid})`.
    pub orthogonality: Vec<OrthogonalityStat>,
}

impl MartingaleCheck {
    pub fn max_z(&self) -> f64 {
        self.orthogonality
            .iter()
            .map(|o| o.stat.z_score(0.0))
            .fold(self.terminal.z_score(0.0), f64::max)
    }

    pub fn passes(&self, n_se: f64) -> bool {
        self.max_z() < n_se
    }
}

/// Zero-mean checks on residual paths; `x_mid[p]` is `X_{t_mid}` on path `p`.
pub fn martingale_statistics(
    test_function: &str,
    residuals: &[Vec<f64>],
    x_mid: &[f64],
    mid: usize,
) -> MartingaleCheck {
    let terminal: Vec<f64> = residuals.iter().map(|m| m[m.len() - 1]).collect();
    let orthogonality = PAST_TEST_FUNCTIONALS
        .iter()
        .map(|&name| {
            let v: Vec<f64> = residuals
                .iter()
                .zip(x_mid)
                .map(|(m, &x)| (m[m.len() - 1] - m[mid]) * past_test_functional(name, x))
                .collect();
            OrthogonalityStat {
                functional: name.to_string(),
                stat: mean_se(&v),
            }
        })
        .collect();
    MartingaleCheck {
        test_function: test_function.to_string(),
        terminal: mean_se(&terminal),
        orthogonality,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BallModulus {
    pub radius: f64,
    pub deltas: Vec<f64>,
    /// Running maximum over probes, nondecreasing in δ.
    pub modulus: Vec<f64>,
    /// `max modulus / δ` over the ladder.
    pub lipschitz_estimate: f64,
}

/// Estimates `sup |𝓛f(η1)(t) - 𝓛f(η2)(t)|` over random path pairs in the
/// ball `||η|| <= radius` with `||η1 - η2|| < δ`, for each `δ` in `deltas`.
pub fn generator_ball_modulus(
    f: &TestFunction,
    functional: &PathFunctionalH,
    dynamics: &Dynamics,
    radius: f64,
    n_probes: usize,
    deltas: &[f64],
    seed: u64,
) -> Result<BallModulus> {
    let (lo, hi) = dynamics.coeffs.h.x_range();
    if !(radius > 0.0 && -radius >= lo && radius <= hi) {
        return Err(LabError::validation(format!(
            "ball radius {radius} must be positive and inside the tabulated range [{lo}, {hi}]"
        )));
    }
    let mut deltas = deltas.to_vec();
    deltas.sort_by(f64::total_cmp);
    let n_nodes = 32;
    let times: Vec<f64> = (0..n_nodes)
        .map(|i| i as f64 / (n_nodes - 1) as f64)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw = vec![0.0f64; deltas.len()];
    for probe in 0..n_probes {
        let mut base = Vec::with_capacity(n_nodes);
        let mut x: f64 = rng.random_range(-radius..=radius);
        for _ in 0..n_nodes {
            base.push(x);
            x = (x + rng.random_range(-0.2..=0.2) * radius).clamp(-radius, radius);
        }
        let direction: Vec<f64> = if probe % 4 == 0 {
            let s = if probe % 8 == 0 { 1.0 } else { -1.0 };
            vec![s; n_nodes]
        } else {
            (0..n_nodes).map(|_| rng.random_range(-1.0..=1.0)).collect()
        };
        let i = rng.random_range(0..n_nodes);
        let p1 = CaglapPathView::new(&times, &base)?;
        let v1 = eval_generator(f, functional, dynamics, &p1, i)?.total;
        for (slot, &d) in raw.iter_mut().zip(&deltas) {
            let moved: Vec<f64> = base
                .iter()
                .zip(&direction)
                .map(|(b, u)| (b + 0.999 * d * u).clamp(-radius, radius))
                .collect();
            let p2 = CaglapPathView::new(&times, &moved)?;
            let v2 = eval_generator(f, functional, dynamics, &p2, i)?.total;
            *slot = slot.max((v1 - v2).abs());
        }
    }
    let mut modulus = Vec::with_capacity(raw.len());
    let mut running = 0.0f64;
    for v in raw {
        running = running.max(v);
        modulus.push(running);
    }
    let lipschitz_estimate = deltas
        .iter()
        .zip(&modulus)
        .filter(|(d, _)| **d > 0.0)
        .map(|(d, m)| m / d)
        .fold(0.0, f64::max);
    Ok(BallModulus {
        radius,
        deltas,
        modulus,
        lipschitz_estimate,
    })
}
