//! Σ construction by mollification, the transform `h` with `h' = exp(-Σ)`,
//! and the operators `L` / `L0` evaluated through conjugates `φ ∘ h`.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{LabError, Result};
use crate::quadrature::{gauss_legendre_16, integrate_adaptive, AdaptiveOptions};
use crate::stats::linear_fit;

pub type RealFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

pub fn real_fn(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> RealFn {
    Arc::new(f)
}

/// Nodes `i * half_width / cells_per_side` for `i` in `-cells_per_side..=cells_per_side`.
/// Zero is always an exact node.
pub fn symmetric_grid(half_width: f64, cells_per_side: usize) -> Vec<f64> {
    let n = cells_per_side as i64;
    let dx = half_width / cells_per_side as f64;
    (-n..=n).map(|i| i as f64 * dx).collect()
}

#[derive(Clone)]
pub struct DriftSpec {
    pub name: String,
    /// Antiderivative of the (possibly distributional) drift.
    pub beta: RealFn,
    pub beta_prime: Option<RealFn>,
}

impl fmt::Debug for DriftSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DriftSpec")
            .field("name", &self.name)
            .field("classical", &self.beta_prime.is_some())
            .finish()
    }
}

impl DriftSpec {
    pub fn zero() -> Self {
        Self {
            name: "zero".into(),
            beta: real_fn(|_| 0.0),
            beta_prime: Some(real_fn(|_| 0.0)),
        }
    }

    /// `beta(x) = slope * x`, a constant classical drift.
    pub fn linear(slope: f64) -> Self {
        Self {
            name: format!("linear({slope})"),
            beta: real_fn(move |x| slope * x),
            beta_prime: Some(real_fn(move |_| slope)),
        }
    }

    /// `beta(x) = slope * clamp(x, lo, hi)`. The derivative jumps at the
    /// clamp points, so only the antiderivative is declared.
    pub fn clamped_linear(slope: f64, lo: f64, hi: f64) -> Self {
        Self {
            name: format!("clamped_linear({slope},{lo},{hi})"),
            beta: real_fn(move |x| slope * x.clamp(lo, hi)),
            beta_prime: None,
        }
    }

    /// `beta(x) = amplitude * sum_{j<terms} 2^{-j/2} sin(2^j x)`.
    pub fn weierstrass(amplitude: f64, terms: usize) -> Self {
        Self {
            name: format!("weierstrass({amplitude},{terms})"),
            beta: real_fn(move |x| amplitude * weierstrass_sum(x, terms)),
            beta_prime: None,
        }
    }

    pub fn custom(name: impl Into<String>, beta: RealFn, beta_prime: Option<RealFn>) -> Self {
        Self {
            name: name.into(),
            beta,
            beta_prime,
        }
    }

    /// Checks finiteness of `beta` and, when a derivative is declared, that a
    /// central difference of `beta` agrees with it within `tol`.
    pub fn validate(&self, test_grid: &[f64], tol: f64) -> Result<()> {
        if !(self.beta)(0.0).is_finite() {
            return Err(LabError::validation(format!(
                "drift {}: beta(0) is not finite",
                self.name
            )));
        }
        let step = 1e-5;
        for &x in test_grid {
            let b = (self.beta)(x);
            if !b.is_finite() {
                return Err(LabError::validation(format!(
                    "drift {}: beta({x}) = {b}",
                    self.name
                )));
            }
            if let Some(bp) = &self.beta_prime {
                let fd = ((self.beta)(x + step) - (self.beta)(x - step)) / (2.0 * step);
                let d = bp(x);
                if (fd - d).abs() > tol.max(1e-6) * (1.0 + d.abs()) {
                    return Err(LabError::validation(format!(
                        "drift {}: declared beta'({x}) = {d} but finite difference gives {fd}",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn weierstrass_sum(x: f64, terms: usize) -> f64 {
    let mut s = 0.0;
    let mut freq = 1.0;
    let mut amp = 1.0;
    for _ in 0..terms {
        s += amp * (freq * x).sin();
        freq *= 2.0;
        amp *= std::f64::consts::FRAC_1_SQRT_2;
    }
    s
}

#[derive(Clone)]
pub struct DiffusionSpec {
    pub name: String,
    pub sigma: RealFn,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl fmt::Debug for DiffusionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffusionSpec")
            .field("name", &self.name)
            .field("sigma_min", &self.sigma_min)
            .field("sigma_max", &self.sigma_max)
            .finish()
    }
}

impl DiffusionSpec {
    pub fn constant(value: f64) -> Self {
        Self {
            name: format!("constant({value})"),
            sigma: real_fn(move |_| value),
            sigma_min: value,
            sigma_max: value,
        }
    }

    pub fn custom(name: impl Into<String>, sigma: RealFn, sigma_min: f64, sigma_max: f64) -> Self {
        Self {
            name: name.into(),
            sigma,
            sigma_min,
            sigma_max,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        (self.sigma)(x)
    }

    pub fn validate(&self, grid: &[f64]) -> Result<()> {
        if !(self.sigma_min > 0.0) || self.sigma_max < self.sigma_min {
            return Err(LabError::validation(format!(
                "diffusion {}: need 0 < sigma_min <= sigma_max, got [{}, {}]",
                self.name, self.sigma_min, self.sigma_max
            )));
        }
        for &x in grid {
            let s = self.eval(x);
            if !(s >= self.sigma_min * (1.0 - 1e-12) && s <= self.sigma_max * (1.0 + 1e-12)) {
                return Err(LabError::validation(format!(
                    "diffusion {}: sigma({x}) = {s} outside [{}, {}]",
                    self.name, self.sigma_min, self.sigma_max
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MollifierShape {
    Gaussian,
    Bump,
}

impl MollifierShape {
    fn density(self, t: f64) -> f64 {
        match self {
            MollifierShape::Gaussian => (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt(),
            MollifierShape::Bump => {
                let u = 1.0 - t * t;
                if u <= 0.0 {
                    0.0
                } else {
                    35.0 / 32.0 * u * u * u
                }
            }
        }
    }

    fn density_prime(self, t: f64) -> f64 {
        match self {
            MollifierShape::Gaussian => -t * self.density(t),
            MollifierShape::Bump => {
                let u = 1.0 - t * t;
                if u <= 0.0 {
                    0.0
                } else {
                    -105.0 / 16.0 * t * u * u
                }
            }
        }
    }

    /// Support used for quadrature and its panel count.
    fn support(self) -> (f64, usize) {
        match self {
            MollifierShape::Gaussian => (8.0, 8),
            MollifierShape::Bump => (1.0, 2),
        }
    }
}

/// Nodes and weights of the unit-width mollifier, shared across evaluations.
struct MollifierRule {
    t: Vec<f64>,
    rho: Vec<f64>,
    rho_prime: Vec<f64>,
}

impl MollifierRule {
    fn new(shape: MollifierShape) -> Self {
        let (half, panels) = shape.support();
        let rule = gauss_legendre_16();
        let h = 2.0 * half / panels as f64;
        let mut t = Vec::new();
        let mut rho = Vec::new();
        let mut rho_prime = Vec::new();
        for p in 0..panels {
            let lo = -half + p as f64 * h;
            for (x, w) in rule.mapped(lo, lo + h) {
                t.push(x);
                rho.push(w * shape.density(x));
                rho_prime.push(w * shape.density_prime(x));
            }
        }
        Self { t, rho, rho_prime }
    }

    /// `(f * rho_eps)(y)`
    fn smooth(&self, f: &RealFn, y: f64, eps: f64) -> f64 {
        self.t
            .iter()
            .zip(&self.rho)
            .map(|(&t, &w)| w * f(y - eps * t))
            .sum()
    }

    /// `(f * rho_eps')(y)`, written against `f(y)` so that large offsets cancel.
    fn smooth_derivative(&self, f: &RealFn, y: f64, eps: f64) -> f64 {
        let f0 = f(y);
        let s: f64 = self
            .t
            .iter()
            .zip(&self.rho_prime)
            .map(|(&t, &w)| w * (f(y - eps * t) - f0))
            .sum();
        s / eps
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct MollifierConfig {
    /// Strictly decreasing smoothing radii.
    pub widths: Vec<f64>,
    pub quadrature_tol: f64,
    pub convergence_tol: f64,
    pub shape: MollifierShape,
}

impl Default for MollifierConfig {
    fn default() -> Self {
        Self {
            widths: vec![1e-3, 1e-4, 1e-5],
            quadrature_tol: 1e-8,
            convergence_tol: 1e-4,
            shape: MollifierShape::Gaussian,
        }
    }
}

impl MollifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(LabError::validation("mollifier widths must be non-empty"));
        }
        if self.widths.iter().any(|w| !(*w > 0.0)) || self.widths.windows(2).any(|p| p[1] >= p[0]) {
            return Err(LabError::validation(
                "mollifier widths must be positive and strictly decreasing",
            ));
        }
        if !(self.quadrature_tol > 0.0 && self.convergence_tol > 0.0) {
            return Err(LabError::validation(
                "mollifier tolerances must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SigmaFunction {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub alpha: f64,
    pub holder_const: f64,
    pub sup_bound: f64,
    pub converged: bool,
    /// Sup-grid gap between the two finest mollification levels, when two exist.
    pub level_gap: Option<f64>,
}

impl SigmaFunction {
    /// Wraps a known Σ (for instance a closed form) sampled on `grid`.
    pub fn from_values(grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        validate_grid(&grid)?;
        if values.len() != grid.len() {
            return Err(LabError::validation("Σ values and grid differ in length"));
        }
        let (alpha, holder_const) = holder_fit(&grid, &values);
        let sup_bound = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Ok(Self {
            grid,
            values,
            alpha,
            holder_const,
            sup_bound,
            converged: true,
            level_gap: None,
        })
    }

    pub fn from_fn(grid: Vec<f64>, sigma: impl Fn(f64) -> f64) -> Result<Self> {
        let values = grid.iter().map(|&x| sigma(x)).collect();
        Self::from_values(grid, values)
    }

    pub fn zero(grid: Vec<f64>) -> Result<Self> {
        Self::from_fn(grid, |_| 0.0)
    }
}

fn validate_grid(grid: &[f64]) -> Result<usize> {
    if grid.len() < 2 {
        return Err(LabError::validation("grid needs at least two nodes"));
    }
    if grid.windows(2).any(|p| !(p[1] > p[0])) {
        return Err(LabError::validation("grid must be strictly increasing"));
    }
    grid.iter()
        .position(|&x| x == 0.0)
        .ok_or_else(|| LabError::validation("grid must contain 0 as a node"))
}

/// Hölder exponent from the log-log slope of the lag oscillation, and the
/// smallest constant that makes the bound hold over every pair of nodes.
fn holder_fit(grid: &[f64], values: &[f64]) -> (f64, f64) {
    let n = grid.len();
    let mean_dx = (grid[n - 1] - grid[0]) / (n - 1) as f64;
    let mut lags = Vec::new();
    let mut lag = if n >= 64 { 4 } else { 1 };
    while lag <= ((n - 1) / 8).max(1) {
        lags.push(lag);
        lag *= 2;
    }
    let mut log_l = Vec::new();
    let mut log_osc = Vec::new();
    for &l in &lags {
        let osc = (0..n - l)
            .map(|i| (values[i + l] - values[i]).abs())
            .fold(0.0, f64::max);
        if osc > 1e-14 {
            log_l.push((l as f64 * mean_dx).ln());
            log_osc.push(osc.ln());
        }
    }
    let alpha = if log_l.len() >= 2 {
        linear_fit(&log_l, &log_osc).1.clamp(0.0, 1.0)
    } else {
        1.0
    };
    let constant = (0..n - 1)
        .into_par_iter()
        .map(|i| {
            let mut best = 0.0f64;
            for j in i + 1..n {
                let d = (values[j] - values[i]).abs();
                if d > 0.0 {
                    best = best.max(d / (grid[j] - grid[i]).powf(alpha));
                }
            }
            best
        })
        .reduce(|| 0.0, f64::max);
    (alpha, constant)
}

/// Σ_n(x) = 2 ∫_0^x β'_n / σ_n² at the two finest widths of `moll`.
///
/// `β'_n` is `β * ρ'_{1/n}`; `β` is never differentiated numerically.
pub fn compute_sigma_function(
    drift: &DriftSpec,
    diffusion: &DiffusionSpec,
    moll: &MollifierConfig,
    grid: &[f64],
) -> Result<SigmaFunction> {
    moll.validate()?;
    let zero = validate_grid(grid)?;
    let rule = MollifierRule::new(moll.shape);
    let finest = &moll.widths[moll.widths.len().saturating_sub(2)..];
    let mut levels = Vec::with_capacity(2);
    for &eps in finest {
        levels.push(sigma_level(
            drift,
            diffusion,
            &rule,
            eps,
            moll.quadrature_tol,
            grid,
            zero,
        )?);
    }
    let values = levels.pop().expect("at least one width");
    let level_gap = levels.pop().map(|coarse| {
        coarse
            .iter()
            .zip(&values)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    });
    if let Some(gap) = level_gap {
        if gap >= moll.convergence_tol {
            return Err(LabError::NonConvergent {
                gap,
                tol: moll.convergence_tol,
            });
        }
    }
    let mut out = SigmaFunction::from_values(grid.to_vec(), values)?;
    out.converged = level_gap.is_some();
    out.level_gap = level_gap;
    Ok(out)
}

fn sigma_level(
    drift: &DriftSpec,
    diffusion: &DiffusionSpec,
    rule: &MollifierRule,
    eps: f64,
    quadrature_tol: f64,
    grid: &[f64],
    zero: usize,
) -> Result<Vec<f64>> {
    let span = grid[grid.len() - 1] - grid[0];
    let integrand = |y: f64| {
        let bp = rule.smooth_derivative(&drift.beta, y, eps);
        let s = rule.smooth(&diffusion.sigma, y, eps);
        2.0 * bp / (s * s)
    };
    let increments: Vec<f64> = grid
        .par_windows(2)
        .map(|p| {
            let opts = AdaptiveOptions {
                abs_tol: quadrature_tol * (p[1] - p[0]) / span,
                rel_tol: 0.0,
                max_intervals: 200,
            };
            integrate_adaptive(integrand, p[0], p[1], opts).map(|r| r.value)
        })
        .collect::<Result<_>>()?;
    let mut values = vec![0.0; grid.len()];
    for i in zero..grid.len() - 1 {
        values[i + 1] = values[i] + increments[i];
    }
    for i in (0..zero).rev() {
        values[i] = values[i + 1] - increments[i];
    }
    Ok(values)
}

/// `expm1(u) / u`, continuous at 0.
fn expm1_ratio(u: f64) -> f64 {
    if u.abs() < 1e-8 {
        1.0 + 0.5 * u
    } else {
        u.exp_m1() / u
    }
}

/// `-ln(1 - u) / u`, continuous at 0.
fn log1p_ratio(u: f64) -> f64 {
    if u.abs() < 1e-8 {
        1.0 + 0.5 * u
    } else {
        -(-u).ln_1p() / u
    }
}

/// The transform `h` for Σ interpolated linearly between grid nodes.
///
/// With that interpolation `h` is piecewise exponential and is integrated in
/// closed form, so `h'` equals `exp(-Σ)` exactly at nodes and `h` is strictly
/// increasing by construction. Methods without the `_ext` suffix refuse
/// points outside the table; the `_ext` variants continue Σ as a constant.
#[derive(Debug, Clone)]
pub struct HTransform {
    x: Vec<f64>,
    sigma: Vec<f64>,
    h: Vec<f64>,
    hprime: Vec<f64>,
    identity: bool,
}

impl HTransform {
    pub fn build(sigma_fn: &SigmaFunction) -> Result<Self> {
        if !sigma_fn.converged {
            return Err(LabError::validation(
                "h-transform needs a converged Σ (two mollification levels within tolerance)",
            ));
        }
        Self::from_table(&sigma_fn.grid, &sigma_fn.values)
    }

    pub fn identity(half_width: f64) -> Self {
        let grid = symmetric_grid(half_width, 8);
        let zeros = vec![0.0; grid.len()];
        Self::from_table(&grid, &zeros).expect("symmetric grid is valid")
    }

    fn from_table(grid: &[f64], sigma: &[f64]) -> Result<Self> {
        let zero = validate_grid(grid)?;
        let n = grid.len();
        let mut h = vec![0.0; n];
        for i in zero..n - 1 {
            h[i + 1] = h[i] + cell_integral(grid[i], grid[i + 1], sigma[i], sigma[i + 1]);
        }
        for i in (0..zero).rev() {
            h[i] = h[i + 1] - cell_integral(grid[i], grid[i + 1], sigma[i], sigma[i + 1]);
        }
        let hprime = sigma.iter().map(|s| (-s).exp()).collect();
        Ok(Self {
            x: grid.to_vec(),
            sigma: sigma.to_vec(),
            h,
            hprime,
            identity: sigma.iter().all(|&s| s == 0.0),
        })
    }

    pub fn grid(&self) -> &[f64] {
        &self.x
    }
    pub fn sigma_values(&self) -> &[f64] {
        &self.sigma
    }
    pub fn h_values(&self) -> &[f64] {
        &self.h
    }
    pub fn hprime_values(&self) -> &[f64] {
        &self.hprime
    }

    pub fn x_range(&self) -> (f64, f64) {
        (self.x[0], self.x[self.x.len() - 1])
    }

    pub fn y_range(&self) -> (f64, f64) {
        (self.h[0], self.h[self.h.len() - 1])
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    pub fn max_hprime(&self) -> f64 {
        self.hprime.iter().cloned().fold(0.0, f64::max)
    }

    pub fn min_hprime(&self) -> f64 {
        self.hprime.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// `exp(max Σ)`, the Lipschitz constant of `h^{-1}`.
    pub fn inverse_lipschitz(&self) -> f64 {
        self.sigma
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
            .exp()
    }

    fn check_x(&self, x: f64) -> Result<()> {
        let (lo, hi) = self.x_range();
        if x >= lo && x <= hi {
            Ok(())
        } else {
            Err(LabError::RangeError {
                what: "x",
                value: x,
                lo,
                hi,
            })
        }
    }

    fn check_y(&self, y: f64) -> Result<()> {
        let (lo, hi) = self.y_range();
        if y >= lo && y <= hi {
            Ok(())
        } else {
            Err(LabError::RangeError {
                what: "y",
                value: y,
                lo,
                hi,
            })
        }
    }

    /// Cell `i` with `x_i <= x < x_{i+1}`, clamped to the table; `None` outside.
    fn cell_of(&self, x: f64) -> Option<usize> {
        let n = self.x.len();
        if x < self.x[0] || x > self.x[n - 1] {
            return None;
        }
        let k = self.x.partition_point(|&g| g <= x);
        Some(k.saturating_sub(1).min(n - 2))
    }

    fn slope(&self, i: usize) -> f64 {
        (self.sigma[i + 1] - self.sigma[i]) / (self.x[i + 1] - self.x[i])
    }

    /// Σ at `x` and the local slope; constant continuation off the table.
    fn local(&self, x: f64) -> (f64, f64) {
        let n = self.x.len();
        match self.cell_of(x) {
            Some(i) => {
                let s = self.slope(i);
                (self.sigma[i] + s * (x - self.x[i]), s)
            }
            None if x < self.x[0] => (self.sigma[0], 0.0),
            None => (self.sigma[n - 1], 0.0),
        }
    }

    pub fn sigma_at(&self, x: f64) -> Result<f64> {
        self.check_x(x)?;
        Ok(self.sigma_ext(x))
    }

    pub fn sigma_ext(&self, x: f64) -> f64 {
        self.local(x).0
    }

    pub fn h(&self, x: f64) -> Result<f64> {
        self.check_x(x)?;
        Ok(self.h_ext(x))
    }

    pub fn h_ext(&self, x: f64) -> f64 {
        let n = self.x.len();
        if x < self.x[0] {
            return self.h[0] + self.hprime[0] * (x - self.x[0]);
        }
        if x > self.x[n - 1] {
            return self.h[n - 1] + self.hprime[n - 1] * (x - self.x[n - 1]);
        }
        let i = self.cell_of(x).expect("inside table");
        let t = x - self.x[i];
        self.h[i] + self.hprime[i] * t * expm1_ratio(-self.slope(i) * t)
    }

    pub fn hprime(&self, x: f64) -> Result<f64> {
        self.check_x(x)?;
        Ok(self.hprime_ext(x))
    }

    pub fn hprime_ext(&self, x: f64) -> f64 {
        (-self.sigma_ext(x)).exp()
    }

    /// `h^{-1}(y)`: bisection for the cell, closed-form solve inside it, and
    /// one Newton polish.
    pub fn inverse(&self, y: f64) -> Result<f64> {
        self.check_y(y)?;
        Ok(self.inverse_ext(y))
    }

    pub fn inverse_ext(&self, y: f64) -> f64 {
        let n = self.h.len();
        if y < self.h[0] {
            return self.x[0] + (y - self.h[0]) / self.hprime[0];
        }
        if y > self.h[n - 1] {
            return self.x[n - 1] + (y - self.h[n - 1]) / self.hprime[n - 1];
        }
        let k = self.h.partition_point(|&g| g <= y);
        let i = k.saturating_sub(1).min(n - 2);
        let s = self.slope(i);
        let dx = self.x[i + 1] - self.x[i];
        let r = (y - self.h[i]) / self.hprime[i];
        let mut t = (r * log1p_ratio(s * r)).clamp(0.0, dx);
        let resid = self.hprime[i] * t * expm1_ratio(-s * t) - (y - self.h[i]);
        let slope_here = self.hprime[i] * (-s * t).exp();
        if slope_here > 0.0 {
            t = (t - resid / slope_here).clamp(0.0, dx);
        }
        self.x[i] + t
    }

    /// `h(x + w) - h(x)`, summed cell by cell for short moves so that small
    /// increments keep full relative accuracy.
    pub fn increment(&self, x: f64, w: f64) -> f64 {
        if w == 0.0 || self.identity {
            return w;
        }
        if !self.is_short_move(x, w) {
            return self.h_ext(x + w) - self.h_ext(x);
        }
        let dir = w.signum();
        let mut a = x;
        let mut remaining = w;
        let mut total = 0.0;
        loop {
            let (sig, s) = self.local_directional(a, dir);
            let (len, next) = match self.next_node(a, dir) {
                Some(bd) if (bd - a).abs() < remaining.abs() => (bd - a, Some(bd)),
                _ => (remaining, None),
            };
            total += (-sig).exp() * len * expm1_ratio(-s * len);
            match next {
                Some(bd) => {
                    remaining -= len;
                    a = bd;
                }
                None => return total,
            }
        }
    }

    /// `h^{-1}(h(x) + z) - x`, the jump size in x-coordinates produced by a
    /// jump `z` in y-coordinates.
    pub fn inverse_increment(&self, x: f64, z: f64) -> f64 {
        if z == 0.0 || self.identity {
            return z;
        }
        let y = self.h_ext(x);
        let coarse = self.inverse_ext(y + z) - x;
        if !self.is_short_move(x, coarse) {
            return coarse;
        }
        let dir = z.signum();
        let mut a = x;
        let mut remaining = z;
        let mut total = 0.0;
        for _ in 0..16 {
            let (sig, s) = self.local_directional(a, dir);
            let hp = (-sig).exp();
            let capacity = self.next_node(a, dir).map(|bd| {
                let len = bd - a;
                (bd, hp * len * expm1_ratio(-s * len))
            });
            match capacity {
                Some((bd, cap)) if remaining.abs() > cap.abs() => {
                    total += bd - a;
                    remaining -= cap;
                    a = bd;
                }
                _ => {
                    let q = remaining / hp;
                    return total + q * log1p_ratio(s * q);
                }
            }
        }
        coarse
    }

    fn is_short_move(&self, x: f64, w: f64) -> bool {
        let (lo, hi) = self.x_range();
        let dx = (hi - lo) / (self.x.len() - 1) as f64;
        w.abs() < 4.0 * dx || x + w < lo || x + w > hi || x < lo || x > hi
    }

    /// Σ and slope just on the `dir` side of `a` (matters exactly at nodes).
    fn local_directional(&self, a: f64, dir: f64) -> (f64, f64) {
        let n = self.x.len();
        if a < self.x[0] || (a == self.x[0] && dir < 0.0) {
            return (self.sigma[0], 0.0);
        }
        if a > self.x[n - 1] || (a == self.x[n - 1] && dir > 0.0) {
            return (self.sigma[n - 1], 0.0);
        }
        let mut i = self.cell_of(a).expect("inside table");
        if dir < 0.0 && a == self.x[i] && i > 0 {
            i -= 1;
        }
        let s = self.slope(i);
        (self.sigma[i] + s * (a - self.x[i]), s)
    }

    /// First node strictly beyond `a` in direction `dir`.
    fn next_node(&self, a: f64, dir: f64) -> Option<f64> {
        if dir > 0.0 {
            let k = self.x.partition_point(|&g| g <= a);
            self.x.get(k).copied()
        } else {
            let k = self.x.partition_point(|&g| g < a);
            k.checked_sub(1).map(|j| self.x[j])
        }
    }

    /// CSV with columns `x,sigma_value,h,hprime`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "x,sigma_value,h,hprime")?;
        for i in 0..self.x.len() {
            writeln!(
                out,
                "{},{},{},{}",
                self.x[i], self.sigma[i], self.h[i], self.hprime[i]
            )?;
        }
        Ok(())
    }
}

fn cell_integral(x0: f64, x1: f64, s0: f64, s1: f64) -> f64 {
    let dx = x1 - x0;
    dx * (-s0).exp() * expm1_ratio(-(s1 - s0))
}

/// Everything the coefficient side of a model provides downstream.
#[derive(Debug, Clone)]
pub struct CoefficientSet {
    pub drift: DriftSpec,
    pub diffusion: DiffusionSpec,
    pub sigma_fn: Arc<SigmaFunction>,
    pub h: Arc<HTransform>,
}

impl CoefficientSet {
    pub fn build(
        drift: DriftSpec,
        diffusion: DiffusionSpec,
        moll: &MollifierConfig,
        grid: &[f64],
    ) -> Result<Self> {
        diffusion.validate(grid)?;
        let sigma_fn = compute_sigma_function(&drift, &diffusion, moll, grid)?;
        let h = HTransform::build(&sigma_fn)?;
        Ok(Self {
            drift,
            diffusion,
            sigma_fn: Arc::new(sigma_fn),
            h: Arc::new(h),
        })
    }

    /// Uses a known Σ; `drift` is kept for reference only.
    pub fn from_sigma(
        drift: DriftSpec,
        diffusion: DiffusionSpec,
        sigma_fn: SigmaFunction,
    ) -> Result<Self> {
        diffusion.validate(&sigma_fn.grid)?;
        let h = HTransform::build(&sigma_fn)?;
        Ok(Self {
            drift,
            diffusion,
            sigma_fn: Arc::new(sigma_fn),
            h: Arc::new(h),
        })
    }

    /// σ constant, no drift: `h` is the identity on `[-half_width, half_width]`.
    pub fn brownian(sigma: f64, half_width: f64) -> Self {
        let grid = symmetric_grid(half_width, 8);
        let sigma_fn = SigmaFunction::zero(grid).expect("valid grid");
        Self::from_sigma(DriftSpec::zero(), DiffusionSpec::constant(sigma), sigma_fn)
            .expect("valid inputs")
    }

    pub fn sigma0(&self, y: f64) -> Result<f64> {
        eval_sigma0(&self.h, &self.diffusion, y)
    }
}

/// Bounded C² function `φ` acting as the conjugate of `f = φ ∘ h`.
#[derive(Clone)]
pub struct TestFunction {
    pub name: String,
    pub phi: RealFn,
    pub phi_prime: RealFn,
    pub phi_second: RealFn,
    /// Declared bound on `|φ|`; infinite for functions only bounded on the
    /// working range (identity, square).
    pub bound: f64,
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TestFunction({})", self.name)
    }
}

impl TestFunction {
    pub fn new(
        name: impl Into<String>,
        phi: RealFn,
        phi_prime: RealFn,
        phi_second: RealFn,
        bound: f64,
    ) -> Self {
        Self {
            name: name.into(),
            phi,
            phi_prime,
            phi_second,
            bound,
        }
    }

    pub fn identity() -> Self {
        Self::new(
            "identity",
            real_fn(|y| y),
            real_fn(|_| 1.0),
            real_fn(|_| 0.0),
            f64::INFINITY,
        )
    }

    pub fn square() -> Self {
        Self::new(
            "square",
            real_fn(|y| y * y),
            real_fn(|y| 2.0 * y),
            real_fn(|_| 2.0),
            f64::INFINITY,
        )
    }

    pub fn sin() -> Self {
        Self::new(
            "sin",
            real_fn(f64::sin),
            real_fn(f64::cos),
            real_fn(|y| -y.sin()),
            1.0,
        )
    }

    pub fn cos() -> Self {
        Self::new(
            "cos",
            real_fn(f64::cos),
            real_fn(|y| -y.sin()),
            real_fn(|y| -y.cos()),
            1.0,
        )
    }

    pub fn tanh() -> Self {
        Self::new(
            "tanh",
            real_fn(f64::tanh),
            real_fn(|y| {
                let c = y.cosh();
                1.0 / (c * c)
            }),
            real_fn(|y| {
                let c = y.cosh();
                -2.0 * y.tanh() / (c * c)
            }),
            1.0,
        )
    }

    pub fn arctan() -> Self {
        Self::new(
            "arctan",
            real_fn(f64::atan),
            real_fn(|y| 1.0 / (1.0 + y * y)),
            real_fn(|y| {
                let d = 1.0 + y * y;
                -2.0 * y / (d * d)
            }),
            std::f64::consts::FRAC_PI_2,
        )
    }

    pub fn constant(c: f64) -> Self {
        Self::new(
            format!("constant({c})"),
            real_fn(move |_| c),
            real_fn(|_| 0.0),
            real_fn(|_| 0.0),
            c.abs(),
        )
    }

    /// `m² (1 - exp(-y²/m²))`: behaves like `y²` near 0, bounded by `m²`.
    pub fn soft_square(m: f64) -> Self {
        let m2 = m * m;
        Self::new(
            format!("soft_square({m})"),
            real_fn(move |y| m2 * (-(y * y) / m2).exp_m1().abs()),
            real_fn(move |y| 2.0 * y * (-(y * y) / m2).exp()),
            real_fn(move |y| (2.0 - 4.0 * y * y / m2) * (-(y * y) / m2).exp()),
            m2,
        )
    }

    /// Conjugate of `f²`.
    pub fn squared(&self) -> Self {
        let (p, dp, d2p) = (
            self.phi.clone(),
            self.phi_prime.clone(),
            self.phi_second.clone(),
        );
        let (p1, dp1) = (p.clone(), dp.clone());
        let p2 = p.clone();
        Self::new(
            format!("({})^2", self.name),
            real_fn(move |y| {
                let v = p(y);
                v * v
            }),
            real_fn(move |y| 2.0 * p1(y) * dp1(y)),
            real_fn(move |y| {
                let d = dp(y);
                2.0 * d * d + 2.0 * p2(y) * d2p(y)
            }),
            self.bound * self.bound,
        )
    }

    /// `f(x) = φ(h(x))`.
    pub fn f(&self, h: &HTransform, x: f64) -> Result<f64> {
        Ok((self.phi)(h.h(x)?))
    }

    /// `f'(x) = φ'(h(x)) h'(x)`.
    pub fn f_prime(&self, h: &HTransform, x: f64) -> Result<f64> {
        Ok((self.phi_prime)(h.h(x)?) * h.hprime(x)?)
    }
}

/// `Lf(x) = (L0 φ)(h(x)) = ½ (σ(x) h'(x))² φ''(h(x))` for `f = φ ∘ h`.
pub fn eval_l(f: &TestFunction, h: &HTransform, diffusion: &DiffusionSpec, x: f64) -> Result<f64> {
    let y = h.h(x)?;
    let s0 = diffusion.eval(x) * h.hprime(x)?;
    Ok(0.5 * s0 * s0 * (f.phi_second)(y))
}

/// `σ0(y) = σ(h^{-1}(y)) h'(h^{-1}(y))`.
pub fn eval_sigma0(h: &HTransform, diffusion: &DiffusionSpec, y: f64) -> Result<f64> {
    let x = h.inverse(y)?;
    Ok(diffusion.eval(x) * h.hprime(x)?)
}

/// `L0 φ(y) = ½ σ0(y)² φ''(y)`.
pub fn eval_l0(
    phi: &TestFunction,
    h: &HTransform,
    diffusion: &DiffusionSpec,
    y: f64,
) -> Result<f64> {
    let s0 = eval_sigma0(h, diffusion, y)?;
    Ok(0.5 * s0 * s0 * (phi.phi_second)(y))
}

/// Max over `points` of `|L(f²) - 2 f Lf - (f' σ)²|`.
pub fn verify_square_identity(
    f: &TestFunction,
    h: &HTransform,
    diffusion: &DiffusionSpec,
    points: &[f64],
) -> Result<f64> {
    let sq = f.squared();
    let mut worst = 0.0f64;
    for &x in points {
        let l_sq = eval_l(&sq, h, diffusion, x)?;
        let lf = eval_l(f, h, diffusion, x)?;
        let fx = f.f(h, x)?;
        let carre = f.f_prime(h, x)? * diffusion.eval(x);
        worst = worst.max((l_sq - 2.0 * fx * lf - carre * carre).abs());
    }
    Ok(worst)
}

/// A C¹ function with its derivative.
#[derive(Clone)]
pub struct C1Function {
    pub value: RealFn,
    pub derivative: RealFn,
}

impl C1Function {
    pub fn identity() -> Self {
        Self {
            value: real_fn(|x| x),
            derivative: real_fn(|_| 1.0),
        }
    }

    pub fn zero() -> Self {
        Self {
            value: real_fn(|_| 0.0),
            derivative: real_fn(|_| 0.0),
        }
    }
}

/// Smooth step: 1 for `t <= 0`, 0 for `t >= 1`.
fn smooth_step(t: f64) -> f64 {
    let bump = |s: f64| if s > 0.0 { (-1.0 / s).exp() } else { 0.0 };
    let a = bump(1.0 - t);
    let b = bump(t);
    if a + b == 0.0 {
        return 0.0;
    }
    a / (a + b)
}

/// `χ_N(x) = χ(|x| - N - 1)`.
fn cutoff(n: usize, x: f64) -> f64 {
    smooth_step(x.abs() - n as f64 - 1.0)
}

/// Domain approximant `f_N` of a C¹ target, tabulated on the h-grid.
///
/// `f_N' = exp(-Σ) G_N` with `G_N = (target' exp(Σ) χ_N) * ρ_{1/N}`, so that
/// `exp(Σ) f_N' = G_N` is C¹ and `L f_N = ½ σ² exp(-Σ) G_N'`.
#[derive(Debug, Clone, Serialize)]
pub struct TestFunctionApprox {
    pub n: usize,
    pub grid: Vec<f64>,
    pub f: Vec<f64>,
    pub f_prime: Vec<f64>,
    pub lf: Vec<f64>,
    g: Vec<f64>,
    g_prime: Vec<f64>,
}

impl TestFunctionApprox {
    fn interp(&self, values: &[f64], x: f64) -> Result<f64> {
        let n = self.grid.len();
        if !(x >= self.grid[0] && x <= self.grid[n - 1]) {
            return Err(LabError::RangeError {
                what: "x",
                value: x,
                lo: self.grid[0],
                hi: self.grid[n - 1],
            });
        }
        let k = self
            .grid
            .partition_point(|&g| g <= x)
            .saturating_sub(1)
            .min(n - 2);
        let t = (x - self.grid[k]) / (self.grid[k + 1] - self.grid[k]);
        Ok(values[k] + t * (values[k + 1] - values[k]))
    }

    pub fn f_at(&self, x: f64) -> Result<f64> {
        self.interp(&self.f, x)
    }

    pub fn f_prime_at(&self, x: f64) -> Result<f64> {
        self.interp(&self.f_prime, x)
    }

    pub fn lf_at(&self, x: f64) -> Result<f64> {
        self.interp(&self.lf, x)
    }

    /// The conjugate `φ_N = f_N ∘ h^{-1}`: `φ_N' = G_N ∘ h^{-1}` and
    /// `φ_N'' = (G_N' exp(Σ)) ∘ h^{-1}`.
    pub fn to_test_function(&self, h: Arc<HTransform>) -> TestFunction {
        let me = Arc::new(self.clone());
        let (m1, m2, m3) = (me.clone(), me.clone(), me);
        let (h1, h2, h3) = (h.clone(), h.clone(), h);
        let bound = self.f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        TestFunction::new(
            format!("approx(N={})", self.n),
            real_fn(move |y| m1.f_at(h1.inverse_ext(y)).unwrap_or(f64::NAN)),
            real_fn(move |y| m2.interp(&m2.g, h2.inverse_ext(y)).unwrap_or(f64::NAN)),
            real_fn(move |y| {
                let x = h3.inverse_ext(y);
                m3.interp(&m3.g_prime, x)
                    .map(|gp| gp * h3.sigma_ext(x).exp())
                    .unwrap_or(f64::NAN)
            }),
            bound,
        )
    }
}

pub fn make_test_function_sequence(
    target: &C1Function,
    h: &HTransform,
    diffusion: &DiffusionSpec,
    n: usize,
) -> Result<TestFunctionApprox> {
    if n == 0 {
        return Err(LabError::validation(
            "approximation index N must be at least 1",
        ));
    }
    let grid = h.grid().to_vec();
    let eps = 1.0 / n as f64;
    let (lo, hi) = h.x_range();
    let dx = (hi - lo) / (grid.len() - 1) as f64;
    let panels = ((2.0 * eps / (4.0 * dx)).ceil() as usize).max(2);
    let shape = MollifierShape::Bump;
    let weighted = |s: f64| (target.derivative)(s) * h.sigma_ext(s).exp() * cutoff(n, s);
    let rule = gauss_legendre_16();
    let pairs: Vec<(f64, f64)> = grid
        .par_iter()
        .map(|&x| {
            let g = rule.integrate_composite(
                |t| weighted(x - eps * t) * shape.density(t),
                -1.0,
                1.0,
                panels,
            );
            let gp = rule.integrate_composite(
                |t| weighted(x - eps * t) * shape.density_prime(t),
                -1.0,
                1.0,
                panels,
            ) / eps;
            (g, gp)
        })
        .collect();
    let (g, g_prime): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let sig = h.sigma_values();
    let f_prime: Vec<f64> = g.iter().zip(sig).map(|(gv, s)| gv * (-s).exp()).collect();
    let lf: Vec<f64> = grid
        .iter()
        .zip(&g_prime)
        .zip(sig)
        .map(|((&x, gp), s)| {
            let sd = diffusion.eval(x);
            0.5 * sd * sd * (-s).exp() * gp
        })
        .collect();
    let zero = validate_grid(&grid)?;
    let mut f = vec![0.0; grid.len()];
    f[zero] = (target.value)(0.0);
    for i in zero..grid.len() - 1 {
        f[i + 1] = f[i] + 0.5 * (grid[i + 1] - grid[i]) * (f_prime[i] + f_prime[i + 1]);
    }
    for i in (0..zero).rev() {
        f[i] = f[i + 1] - 0.5 * (grid[i + 1] - grid[i]) * (f_prime[i] + f_prime[i + 1]);
    }
    if f.iter().chain(&lf).any(|v| !v.is_finite()) {
        return Err(LabError::QuadratureFailure {
            lo,
            hi,
            error: f64::INFINITY,
            tol: 0.0,
        });
    }
    Ok(TestFunctionApprox {
        n,
        grid,
        f,
        f_prime,
        lf,
        g,
        g_prime,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DivergenceRung {
    pub m: f64,
    pub integral_plus: f64,
    pub integral_minus: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct HypothesisReport {
    pub sup_norm: f64,
    /// `(radius, sup_{|x|<=radius} |Σ|)`
    pub sup_growth: Vec<(f64, f64)>,
    pub sup_grows: bool,
    pub holder_alpha: f64,
    pub holder_const: f64,
    /// Exponent fit near 0: Hölder modulus replaced by uniform continuity.
    pub uniform_continuity_only: bool,
    pub divergence: Vec<DivergenceRung>,
    /// Average of `exp(-Σ)` over the outermost ladder step, per side.
    pub tail_slope_plus: f64,
    pub tail_slope_minus: f64,
    /// `exp(-sup|Σ|)`: lower bound for the slopes when Σ is bounded.
    pub slope_lower_bound: f64,
    /// Largest `M` actually used (the ladder stops at the grid edge).
    pub truncation_used: f64,
    pub bounded_and_holder_plausible: bool,
}

/// Diagnostics for boundedness, Hölder regularity and divergence of
/// `∫ exp(-Σ)` on half lines. Nothing here is a proof.
pub fn check_hypotheses(
    sigma_fn: &SigmaFunction,
    truncation_range: f64,
) -> Result<HypothesisReport> {
    let h = HTransform::from_table(&sigma_fn.grid, &sigma_fn.values)?;
    let grid = &sigma_fn.grid;
    let extent = grid[0].abs().min(grid[grid.len() - 1]);
    let sup_within = |r: f64| {
        grid.iter()
            .zip(&sigma_fn.values)
            .filter(|(x, _)| x.abs() <= r)
            .fold(0.0f64, |m, (_, v)| m.max(v.abs()))
    };
    let sup_growth: Vec<(f64, f64)> = [0.125, 0.25, 0.5, 1.0]
        .iter()
        .map(|f| (f * extent, sup_within(f * extent)))
        .collect();
    let half = sup_growth[2].1;
    let full = sup_growth[3].1;
    let sup_grows = full > 1e-12 && full > 1.25 * half;
    let top = truncation_range.min(extent);
    let divergence: Vec<DivergenceRung> = [1.0 / 16.0, 0.125, 0.25, 0.5, 1.0]
        .iter()
        .map(|f| {
            let m = f * top;
            DivergenceRung {
                m,
                integral_plus: h.h_ext(m),
                integral_minus: -h.h_ext(-m),
            }
        })
        .collect();
    let (a, b) = (&divergence[3], &divergence[4]);
    let tail_slope_plus = (b.integral_plus - a.integral_plus) / (b.m - a.m);
    let tail_slope_minus = (b.integral_minus - a.integral_minus) / (b.m - a.m);
    let uniform_continuity_only = sigma_fn.alpha < 0.05;
    Ok(HypothesisReport {
        sup_norm: sigma_fn.sup_bound,
        sup_growth,
        sup_grows,
        holder_alpha: sigma_fn.alpha,
        holder_const: sigma_fn.holder_const,
        uniform_continuity_only,
        divergence,
        tail_slope_plus,
        tail_slope_minus,
        slope_lower_bound: (-sigma_fn.sup_bound).exp(),
        truncation_used: top,
        bounded_and_holder_plausible: !sup_grows && sigma_fn.holder_const.is_finite(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_sigma() -> HTransform {
        let sf = SigmaFunction::from_fn(symmetric_grid(3.0, 600), |x| 0.6 * x).unwrap();
        HTransform::build(&sf).unwrap()
    }

    #[test]
    fn zero_drift_gives_zero_sigma() {
        let sf = compute_sigma_function(
            &DriftSpec::zero(),
            &DiffusionSpec::constant(1.0),
            &MollifierConfig::default(),
            &symmetric_grid(2.0, 40),
        )
        .unwrap();
        assert!(sf.converged);
        assert!(sf.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_drift_gives_linear_sigma() {
        for shape in [MollifierShape::Gaussian, MollifierShape::Bump] {
            let moll = MollifierConfig {
                shape,
                ..MollifierConfig::default()
            };
            let grid = symmetric_grid(2.0, 200);
            let sf = compute_sigma_function(
                &DriftSpec::linear(0.3),
                &DiffusionSpec::constant(1.0),
                &moll,
                &grid,
            )
            .unwrap();
            for (x, v) in grid.iter().zip(&sf.values) {
                assert!((v - 0.6 * x).abs() < 1e-6, "{shape:?} x={x} v={v}");
            }
            assert!((sf.alpha - 1.0).abs() < 1e-9);
            assert!((sf.holder_const - 0.6).abs() < 1e-6);
        }
    }

    #[test]
    fn weierstrass_sigma_is_twice_beta() {
        let drift = DriftSpec::weierstrass(1.0, 9);
        let grid = symmetric_grid(4.0, 2000);
        let moll = MollifierConfig {
            widths: vec![1e-4, 1e-5],
            ..MollifierConfig::default()
        };
        let sf =
            compute_sigma_function(&drift, &DiffusionSpec::constant(1.0), &moll, &grid).unwrap();
        let b0 = (drift.beta)(0.0);
        let worst = grid
            .iter()
            .zip(&sf.values)
            .map(|(&x, v)| (v - 2.0 * ((drift.beta)(x) - b0)).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-6, "worst {worst}");
        assert!((sf.alpha - 0.5).abs() < 0.15, "alpha {}", sf.alpha);
    }

    #[test]
    fn rough_drift_with_coarse_widths_is_nonconvergent() {
        let moll = MollifierConfig {
            widths: vec![0.5, 0.1],
            ..MollifierConfig::default()
        };
        let r = compute_sigma_function(
            &DriftSpec::weierstrass(1.0, 9),
            &DiffusionSpec::constant(1.0),
            &moll,
            &symmetric_grid(1.0, 100),
        );
        assert!(matches!(r, Err(LabError::NonConvergent { .. })));
    }

    #[test]
    fn single_width_is_not_converged_and_blocks_transform() {
        let moll = MollifierConfig {
            widths: vec![1e-4],
            ..MollifierConfig::default()
        };
        let sf = compute_sigma_function(
            &DriftSpec::linear(0.3),
            &DiffusionSpec::constant(1.0),
            &moll,
            &symmetric_grid(1.0, 20),
        )
        .unwrap();
        assert!(!sf.converged);
        assert!(HTransform::build(&sf).is_err());
    }

    #[test]
    fn grid_without_zero_is_rejected() {
        let r = SigmaFunction::zero(vec![0.5, 1.0, 1.5]);
        assert!(matches!(r, Err(LabError::Validation(_))));
    }

    #[test]
    fn h_matches_closed_form_for_linear_sigma() {
        let h = linear_sigma();
        for i in -20..=20 {
            let x = i as f64 * 0.1;
            let exact = (1.0 - (-0.6 * x).exp()) / 0.6;
            assert!((h.h(x).unwrap() - exact).abs() < 1e-12, "x={x}");
        }
        assert_eq!(h.h(0.0).unwrap(), 0.0);
        assert_eq!(h.hprime(0.0).unwrap(), 1.0);
    }

    #[test]
    fn identity_transform() {
        let h = HTransform::identity(5.0);
        for x in [-4.9, -1.0, 0.0, 0.3, 4.2] {
            assert_eq!(h.h(x).unwrap(), x);
            assert_eq!(h.hprime(x).unwrap(), 1.0);
            assert_eq!(h.inverse(x).unwrap(), x);
        }
    }

    #[test]
    fn inverse_out_of_range_is_an_error() {
        let h = linear_sigma();
        let (_, hi) = h.y_range();
        assert!(matches!(
            h.inverse(hi + 1.0),
            Err(LabError::RangeError { .. })
        ));
        assert!(matches!(h.h(10.0), Err(LabError::RangeError { .. })));
    }

    #[test]
    fn small_increments_keep_relative_accuracy() {
        let h = linear_sigma();
        for &(x, w) in &[
            (0.0f64, 1e-12f64),
            (0.005, -3e-11),
            (0.3, 0.004),
            (1.0, 0.75),
        ] {
            let exact = -(-0.6 * x).exp() * (-0.6 * w).exp_m1() / 0.6;
            let got = h.increment(x, w);
            assert!(
                ((got - exact) / exact).abs() < 1e-10,
                "x={x} w={w}: {got} vs {exact}"
            );
            let back = h.inverse_increment(x, got);
            assert!(((back - w) / w).abs() < 1e-9, "x={x} w={w}: {back}");
        }
    }

    #[test]
    fn eval_l_examples() {
        let id = HTransform::identity(3.0);
        let one = DiffusionSpec::constant(1.0);
        assert_eq!(
            eval_l(&TestFunction::square(), &id, &one, 0.7).unwrap(),
            1.0
        );
        let h = linear_sigma();
        for x in [-1.0, 0.0, 1.0, 2.0] {
            assert_eq!(eval_l(&TestFunction::identity(), &h, &one, x).unwrap(), 0.0);
            let v = eval_l(&TestFunction::square(), &h, &one, x).unwrap();
            assert!((v - (-1.2 * x).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn sigma0_examples() {
        let h = linear_sigma();
        let one = DiffusionSpec::constant(1.0);
        let y = h.h(1.0).unwrap();
        assert!((eval_sigma0(&h, &one, y).unwrap() - (-0.6f64).exp()).abs() < 1e-12);
        let s = DiffusionSpec::custom("wavy", real_fn(|x| 1.0 + 0.5 * x.sin().powi(2)), 1.0, 1.5);
        assert_eq!(eval_sigma0(&h, &s, 0.0).unwrap(), s.eval(0.0));
    }

    #[test]
    fn square_identity_examples() {
        let h = linear_sigma();
        let one = DiffusionSpec::constant(1.0);
        let pts: Vec<f64> = (-10..=10).map(|i| i as f64 * 0.2).collect();
        assert!(verify_square_identity(&TestFunction::identity(), &h, &one, &pts).unwrap() < 1e-12);
        assert_eq!(
            verify_square_identity(&TestFunction::constant(2.0), &h, &one, &pts).unwrap(),
            0.0
        );
        let id = HTransform::identity(3.0);
        assert!(verify_square_identity(&TestFunction::sin(), &id, &one, &pts).unwrap() < 1e-8);
    }

    #[test]
    fn soft_square_derivatives_are_consistent() {
        let f = TestFunction::soft_square(2.0);
        for y in [-3.0, -0.5, 0.0, 1.2] {
            let d = 1e-6;
            let fd = ((f.phi)(y + d) - (f.phi)(y - d)) / (2.0 * d);
            assert!((fd - (f.phi_prime)(y)).abs() < 1e-7);
            let fd2 = ((f.phi_prime)(y + d) - (f.phi_prime)(y - d)) / (2.0 * d);
            assert!((fd2 - (f.phi_second)(y)).abs() < 1e-7);
        }
    }

    #[test]
    fn approximant_of_identity_without_drift() {
        let h = HTransform::from_table(&symmetric_grid(12.0, 2400), &vec![0.0; 4801]).unwrap();
        let one = DiffusionSpec::constant(1.0);
        let n = 8;
        let ap = make_test_function_sequence(&C1Function::identity(), &h, &one, n).unwrap();
        for (&x, &fp) in ap.grid.iter().zip(&ap.f_prime) {
            if x.abs() <= n as f64 - 1.0 {
                assert!((fp - 1.0).abs() < 1e-10, "x={x} fp={fp}");
            }
            if x.abs() >= n as f64 + 2.0 + 1.0 / n as f64 {
                assert_eq!(fp, 0.0);
            }
        }
        assert!(ap.f_at(3.0).unwrap() - 3.0 < 1e-10);
        let zero = make_test_function_sequence(&C1Function::zero(), &h, &one, 3).unwrap();
        assert!(zero.f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn approximant_error_shrinks_with_n() {
        let sf = SigmaFunction::from_fn(symmetric_grid(8.0, 1600), |x| 0.6 * x).unwrap();
        let h = HTransform::build(&sf).unwrap();
        let one = DiffusionSpec::constant(1.0);
        let err = |n| {
            let ap = make_test_function_sequence(&C1Function::identity(), &h, &one, n).unwrap();
            ap.grid
                .iter()
                .zip(&ap.f_prime)
                .filter(|(x, _)| x.abs() <= 2.0)
                .map(|(_, fp)| (fp - 1.0).abs())
                .fold(0.0, f64::max)
        };
        let (e2, e4) = (err(2), err(4));
        assert!(e4 < e2, "{e2} {e4}");
    }

    #[test]
    fn hypotheses_zero_sigma() {
        let sf = SigmaFunction::zero(symmetric_grid(8.0, 80)).unwrap();
        let rep = check_hypotheses(&sf, 1e3).unwrap();
        assert_eq!(rep.sup_norm, 0.0);
        assert!(!rep.sup_grows);
        for r in &rep.divergence {
            assert!((r.integral_plus - r.m).abs() < 1e-12);
        }
        assert!((rep.tail_slope_plus - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hypotheses_bounded_and_unbounded() {
        let sf =
            SigmaFunction::from_fn(symmetric_grid(8.0, 800), |x| 0.5 * (3.0 * x).sin()).unwrap();
        let rep = check_hypotheses(&sf, 1e3).unwrap();
        assert!(rep.tail_slope_plus >= rep.slope_lower_bound);
        assert!(rep.tail_slope_minus >= rep.slope_lower_bound);
        assert!(rep.bounded_and_holder_plausible);

        let sf = SigmaFunction::from_fn(symmetric_grid(8.0, 800), |x| 0.6 * x).unwrap();
        let rep = check_hypotheses(&sf, 1e3).unwrap();
        assert!(rep.sup_grows);
        assert!(!rep.bounded_and_holder_plausible);
    }

    #[test]
    fn drift_validation_catches_wrong_derivative() {
        let bad = DriftSpec::custom("bad", real_fn(|x| x * x), Some(real_fn(|_| 1.0)));
        assert!(bad.validate(&[0.0, 1.0], 1e-8).is_err());
        assert!(DriftSpec::linear(0.3)
            .validate(&[-1.0, 0.0, 2.0], 1e-8)
            .is_ok());
    }

    #[test]
    fn csv_export_has_header_and_rows() {
        let h = HTransform::identity(1.0);
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x,sigma_value,h,hprime\n"));
        assert_eq!(text.lines().count(), 18);
    }
}
