//! Jump kernels `Q(y, dx)`, their moment and continuity diagnostics, the
//! pushed-forward kernel `F(y, dz)`, the drift correction `b`, and the
//! nonlocal operator `F^f`.

use std::fmt;
use std::io::Write;

use serde::Serialize;

use crate::coefficients::{eval_sigma0, DiffusionSpec, HTransform, RealFn, TestFunction};
use crate::error::{LabError, Result};
use crate::quadrature::{
    gauss_legendre_16, integrate_adaptive, integrate_best_effort, AdaptiveOptions,
};

/// Jump-size law of a finite-activity kernel (a probability measure).
#[derive(Debug, Clone, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JumpLaw {
    /// `(position, probability)` pairs.
    Atoms(Vec<(f64, f64)>),
    Normal {
        mean: f64,
        std_dev: f64,
    },
}

#[derive(Clone)]
pub enum KernelVariant {
    Empty,
    /// Density `scale * |x|^{-1-gamma}` on both half lines.
    StableTail {
        gamma: f64,
        scale: f64,
    },
    /// `Q(y, dx) = rate(y) * law(dx)` with `rate <= rate_max`.
    FiniteActivity {
        rate: RealFn,
        rate_max: f64,
        law: JumpLaw,
    },
    /// Discrete measures on a `y` grid, interpolated linearly in `y`.
    /// A repeated `y` encodes a jump: the second row applies from that `y` on.
    Tabulated {
        ys: Vec<f64>,
        rows: Vec<Vec<(f64, f64)>>,
    },
}

impl fmt::Debug for KernelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelVariant::Empty => write!(f, "Empty"),
            KernelVariant::StableTail { gamma, scale } => {
                write!(f, "StableTail(gamma={gamma}, scale={scale})")
            }
            KernelVariant::FiniteActivity { rate_max, law, .. } => {
                write!(f, "FiniteActivity(rate_max={rate_max}, law={law:?})")
            }
            KernelVariant::Tabulated { ys, .. } => write!(f, "Tabulated({} rows)", ys.len()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct JumpKernelSpec {
    pub name: String,
    pub variant: KernelVariant,
    /// Exponent of the moment condition `∫ (1 ∧ |x|^{1+α}) Q(y, dx) < ∞`.
    pub alpha: f64,
}

/// A band `lo < |w| <= hi` (closedness adjustable) on one half line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band {
    pub lo: f64,
    pub hi: f64,
    pub include_lo: bool,
    pub include_hi: bool,
}

impl Band {
    fn contains(&self, a: f64) -> bool {
        let above = if self.include_lo {
            a >= self.lo
        } else {
            a > self.lo
        };
        let below = if self.include_hi {
            a <= self.hi
        } else {
            a < self.hi
        };
        a > 0.0 && above && below
    }
}

/// Integration region, described separately on the positive and negative
/// half lines by bands of `|w|`. Zero is never included.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub pos: Option<Band>,
    pub neg: Option<Band>,
}

impl Region {
    fn symmetric(band: Band) -> Self {
        Self {
            pos: Some(band),
            neg: Some(band),
        }
    }

    pub fn all() -> Self {
        Self::symmetric(Band {
            lo: 0.0,
            hi: f64::INFINITY,
            include_lo: false,
            include_hi: false,
        })
    }

    /// `0 < |w| <= r`
    pub fn inner(r: f64) -> Self {
        Self::symmetric(Band {
            lo: 0.0,
            hi: r,
            include_lo: false,
            include_hi: true,
        })
    }

    /// `|w| > r`
    pub fn outer(r: f64) -> Self {
        Self::symmetric(Band {
            lo: r,
            hi: f64::INFINITY,
            include_lo: false,
            include_hi: false,
        })
    }

    /// `lo < |w| <= hi`
    pub fn band(lo: f64, hi: f64) -> Self {
        Self::symmetric(Band {
            lo,
            hi,
            include_lo: false,
            include_hi: true,
        })
    }

    /// `a < w <= b`
    pub fn interval(a: f64, b: f64) -> Self {
        let pos = (b > 0.0 && b > a).then(|| Band {
            lo: a.max(0.0),
            hi: b,
            include_lo: false,
            include_hi: true,
        });
        let neg = (a < 0.0 && b > a).then(|| Band {
            lo: (-b).max(0.0),
            hi: -a,
            include_lo: true,
            include_hi: false,
        });
        Self { pos, neg }
    }

    pub fn contains(&self, w: f64) -> bool {
        if w > 0.0 {
            self.pos.is_some_and(|b| b.contains(w))
        } else if w < 0.0 {
            self.neg.is_some_and(|b| b.contains(-w))
        } else {
            false
        }
    }

    fn signed_intervals(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        if let Some(b) = self.neg {
            if b.hi > b.lo {
                out.push((-b.hi, -b.lo));
            }
        }
        if let Some(b) = self.pos {
            if b.hi > b.lo {
                out.push((b.lo, b.hi));
            }
        }
        out
    }
}

/// Growth of an integrand: `|g(w)| <= C |w|^near_zero` near 0 and
/// `|g(w)| <= C |w|^tail` at infinity. Heavy-tailed quadrature uses these to
/// choose its substitutions and to detect divergence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Orders {
    pub near_zero: f64,
    pub tail: f64,
}

impl Orders {
    pub fn new(near_zero: f64, tail: f64) -> Self {
        Self { near_zero, tail }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationRule {
    /// `k(x) = clamp(x, -R, R)`
    Clamp,
    /// `k(x) = x 1_{|x| <= R}`
    Indicator,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct TruncationFunction {
    pub radius: f64,
    pub rule: TruncationRule,
}

impl Default for TruncationFunction {
    fn default() -> Self {
        Self {
            radius: 1.0,
            rule: TruncationRule::Clamp,
        }
    }
}

impl TruncationFunction {
    pub fn eval(&self, x: f64) -> f64 {
        match self.rule {
            TruncationRule::Clamp => x.clamp(-self.radius, self.radius),
            TruncationRule::Indicator => {
                if x.abs() <= self.radius {
                    x
                } else {
                    0.0
                }
            }
        }
    }

    /// `sup |k|`
    pub fn cap(&self) -> f64 {
        self.radius
    }

    pub fn validate(&self) -> Result<()> {
        if self.radius > 0.0 && self.radius.is_finite() {
            Ok(())
        } else {
            Err(LabError::validation(format!(
                "truncation radius must be positive, got {}",
                self.radius
            )))
        }
    }
}

const QUAD_OPTS: AdaptiveOptions = AdaptiveOptions {
    abs_tol: 1e-11,
    rel_tol: 1e-12,
    max_intervals: 2000,
};

impl JumpKernelSpec {
    pub fn empty() -> Self {
        Self {
            name: "empty".into(),
            variant: KernelVariant::Empty,
            alpha: 1.0,
        }
    }

    pub fn stable(gamma: f64, scale: f64, alpha: f64) -> Self {
        Self {
            name: format!("stable({gamma})"),
            variant: KernelVariant::StableTail { gamma, scale },
            alpha,
        }
    }

    pub fn atoms(rate: f64, atoms: Vec<(f64, f64)>) -> Self {
        Self {
            name: "atoms".into(),
            variant: KernelVariant::FiniteActivity {
                rate: crate::coefficients::real_fn(move |_| rate),
                rate_max: rate,
                law: JumpLaw::Atoms(atoms),
            },
            alpha: 1.0,
        }
    }

    pub fn finite_activity(
        name: impl Into<String>,
        rate: RealFn,
        rate_max: f64,
        law: JumpLaw,
    ) -> Self {
        Self {
            name: name.into(),
            variant: KernelVariant::FiniteActivity {
                rate,
                rate_max,
                law,
            },
            alpha: 1.0,
        }
    }

    pub fn tabulated(ys: Vec<f64>, rows: Vec<Vec<(f64, f64)>>) -> Self {
        Self {
            name: "tabulated".into(),
            variant: KernelVariant::Tabulated { ys, rows },
            alpha: 1.0,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(LabError::validation(format!(
                "kernel alpha must lie in [0,1], got {}",
                self.alpha
            )));
        }
        let check_atoms = |atoms: &[(f64, f64)], what: &str| -> Result<()> {
            for &(w, m) in atoms {
                if w == 0.0 || !w.is_finite() {
                    return Err(LabError::validation(format!(
                        "{what}: jump atom at {w} (zero jumps are not allowed)"
                    )));
                }
                if !(m >= 0.0) {
                    return Err(LabError::validation(format!("{what}: negative mass {m}")));
                }
            }
            Ok(())
        };
        match &self.variant {
            KernelVariant::Empty => Ok(()),
            KernelVariant::StableTail { gamma, scale } => {
                if !(*gamma > 0.0 && *gamma < 2.0) || !(*scale > 0.0) {
                    return Err(LabError::validation(format!(
                        "stable kernel needs gamma in (0,2) and scale > 0, got gamma={gamma}, scale={scale}"
                    )));
                }
                if self.alpha <= gamma - 1.0 {
                    return Err(LabError::DivergentMoment(format!(
                        "stable kernel with gamma={gamma} needs alpha > {}, got {}",
                        gamma - 1.0,
                        self.alpha
                    )));
                }
                Ok(())
            }
            KernelVariant::FiniteActivity { rate_max, law, .. } => {
                if !(*rate_max >= 0.0) {
                    return Err(LabError::validation(
                        "finite-activity rate bound must be nonnegative",
                    ));
                }
                match law {
                    JumpLaw::Atoms(a) => {
                        check_atoms(a, "jump law")?;
                        let total: f64 = a.iter().map(|p| p.1).sum();
                        if (total - 1.0).abs() > 1e-12 {
                            return Err(LabError::validation(format!(
                                "jump law probabilities sum to {total}"
                            )));
                        }
                        Ok(())
                    }
                    JumpLaw::Normal { std_dev, .. } => {
                        if *std_dev > 0.0 {
                            Ok(())
                        } else {
                            Err(LabError::validation("normal jump law needs std_dev > 0"))
                        }
                    }
                }
            }
            KernelVariant::Tabulated { ys, rows } => {
                if ys.is_empty() || ys.len() != rows.len() {
                    return Err(LabError::validation("tabulated kernel needs one row per y"));
                }
                if ys.windows(2).any(|p| p[1] < p[0]) || ys.windows(3).any(|p| p[0] == p[2]) {
                    return Err(LabError::validation(
                        "tabulated kernel ys must be nondecreasing with at most two equal entries",
                    ));
                }
                for r in rows {
                    check_atoms(r, "tabulated kernel")?;
                }
                Ok(())
            }
        }
    }

    /// True when `Q(y, .)` does not depend on `y`.
    pub fn is_state_independent(&self) -> bool {
        matches!(
            self.variant,
            KernelVariant::Empty | KernelVariant::StableTail { .. }
        )
    }

    pub fn is_empty(&self) -> bool {
        match &self.variant {
            KernelVariant::Empty => true,
            KernelVariant::FiniteActivity { rate_max, .. } => *rate_max == 0.0,
            _ => false,
        }
    }

    /// The measure `Q(y, .)` as a list of weighted atoms, if it is discrete.
    pub fn atoms_at(&self, y: f64) -> Option<Vec<(f64, f64)>> {
        match &self.variant {
            KernelVariant::Empty => Some(Vec::new()),
            KernelVariant::FiniteActivity {
                rate,
                law: JumpLaw::Atoms(a),
                ..
            } => {
                let r = rate(y);
                Some(a.iter().map(|&(w, p)| (w, r * p)).collect())
            }
            KernelVariant::Tabulated { ys, rows } => Some(tabulated_row(ys, rows, y)),
            _ => None,
        }
    }

    /// `∫_region g(w) Q(y, dw)`.
    pub fn integrate(
        &self,
        y: f64,
        g: &dyn Fn(f64) -> f64,
        region: &Region,
        orders: Orders,
    ) -> Result<f64> {
        self.integrate_impl(y, g, region, orders, false)
            .map(|(v, _)| v)
    }

    /// Like [`Self::integrate`], but heavy tails out to infinity are integrated
    /// on a fixed budget and the leftover error estimate is returned instead
    /// of failing. Rapidly oscillating integrands against a slowly decaying
    /// density cannot be resolved to tight tolerance from point samples.
    pub fn integrate_lenient(
        &self,
        y: f64,
        g: &dyn Fn(f64) -> f64,
        region: &Region,
        orders: Orders,
    ) -> Result<(f64, f64)> {
        self.integrate_impl(y, g, region, orders, true)
    }

    fn integrate_impl(
        &self,
        y: f64,
        g: &dyn Fn(f64) -> f64,
        region: &Region,
        orders: Orders,
        lenient: bool,
    ) -> Result<(f64, f64)> {
        if let Some(atoms) = self.atoms_at(y) {
            let v = atoms
                .iter()
                .filter(|(w, _)| region.contains(*w))
                .map(|&(w, m)| m * g(w))
                .sum();
            return Ok((v, 0.0));
        }
        match &self.variant {
            KernelVariant::StableTail { gamma, scale } => {
                let (mut total, mut err) = (0.0, 0.0);
                if let Some(b) = region.pos {
                    let (v, e) = stable_side(*gamma, &|a| g(a), b, orders, lenient)?;
                    total += v;
                    err += e;
                }
                if let Some(b) = region.neg {
                    let (v, e) = stable_side(*gamma, &|a| g(-a), b, orders, lenient)?;
                    total += v;
                    err += e;
                }
                Ok((scale * total, scale * err))
            }
            KernelVariant::FiniteActivity {
                rate,
                law: JumpLaw::Normal { mean, std_dev },
                ..
            } => {
                let r = rate(y);
                if r == 0.0 {
                    return Ok((0.0, 0.0));
                }
                let lo_cut = mean - 12.0 * std_dev;
                let hi_cut = mean + 12.0 * std_dev;
                let norm = 1.0 / (std_dev * (2.0 * std::f64::consts::PI).sqrt());
                let mut total = 0.0;
                for (a, b) in region.signed_intervals() {
                    let (a, b) = (a.max(lo_cut), b.min(hi_cut));
                    if b > a {
                        let f = |w: f64| {
                            let u = (w - mean) / std_dev;
                            g(w) * norm * (-0.5 * u * u).exp()
                        };
                        total += integrate_adaptive(f, a, b, QUAD_OPTS)?.value;
                    }
                }
                Ok((r * total, 0.0))
            }
            _ => unreachable!("discrete variants handled above"),
        }
    }

    /// `Q(y, region)`
    pub fn mass(&self, y: f64, region: &Region) -> Result<f64> {
        self.integrate(y, &|_| 1.0, region, Orders::new(0.0, 0.0))
    }

    /// `∫ (1 ∧ |x|^{1+α}) Q(y, dx)`
    pub fn tilted_moment(&self, y: f64) -> Result<f64> {
        let p = 1.0 + self.alpha;
        self.integrate(
            y,
            &|w: f64| w.abs().powf(p).min(1.0),
            &Region::all(),
            Orders::new(p, 0.0),
        )
    }

    /// Tilted masses `(m1, m2)`: `∫_{|x|<=R} |x|^{1+α} Q` and `Q(|x| > R)`.
    pub fn tilted_masses(&self, y: f64, radius: f64) -> Result<(f64, f64)> {
        let p = 1.0 + self.alpha;
        let m1 = self.integrate(
            y,
            &|w: f64| w.abs().powf(p),
            &Region::inner(radius),
            Orders::new(p, p),
        )?;
        let m2 = self.mass(y, &Region::outer(radius))?;
        Ok((m1, m2))
    }
}

fn tabulated_row(ys: &[f64], rows: &[Vec<(f64, f64)>], y: f64) -> Vec<(f64, f64)> {
    let n = ys.len();
    if y < ys[0] || n == 1 {
        return rows[0].clone();
    }
    if y >= ys[n - 1] {
        return rows[n - 1].clone();
    }
    let i = ys.partition_point(|&v| v <= y) - 1;
    let theta = (y - ys[i]) / (ys[i + 1] - ys[i]);
    let mut out: Vec<(f64, f64)> = rows[i]
        .iter()
        .map(|&(w, m)| (w, (1.0 - theta) * m))
        .collect();
    out.extend(rows[i + 1].iter().map(|&(w, m)| (w, theta * m)));
    out
}

/// `∫_band g(a) a^{-1-γ} da` on one half line.
/// Returns the value and the error left over by lenient tail integration.
fn stable_side(
    gamma: f64,
    g: &dyn Fn(f64) -> f64,
    band: Band,
    orders: Orders,
    lenient: bool,
) -> Result<(f64, f64)> {
    if !(band.hi > band.lo) {
        return Ok((0.0, 0.0));
    }
    let mut total = 0.0;
    let mut leftover = 0.0;
    let near_hi = band.hi.min(1.0);
    if band.lo < near_hi {
        if band.lo == 0.0 {
            let c = orders.near_zero - gamma;
            if c <= 0.0 {
                return Err(LabError::DivergentMoment(format!(
                    "integrand of order |x|^{} is not integrable against |x|^(-1-{gamma}) at 0",
                    orders.near_zero
                )));
            }
            let f = |u: f64| {
                let w = u.powf(1.0 / c);
                if w == 0.0 {
                    return 0.0;
                }
                g(w) * w.powf(-gamma) / (c * u)
            };
            total += integrate_adaptive(f, 0.0, near_hi.powf(c), QUAD_OPTS)?.value;
        } else {
            total += log_segment(gamma, g, band.lo, near_hi)?;
        }
    }
    let far_lo = band.lo.max(1.0);
    if far_lo < band.hi {
        if band.hi.is_infinite() {
            let s = gamma - orders.tail;
            if s <= 0.0 {
                return Err(LabError::DivergentMoment(format!(
                    "integrand of order |x|^{} is not integrable against |x|^(-1-{gamma}) at infinity",
                    orders.tail
                )));
            }
            let f = |v: f64| {
                let w = v.powf(-1.0 / s);
                if !w.is_finite() {
                    return 0.0;
                }
                g(w) * w.powf(-gamma) / (s * v)
            };
            if lenient {
                let r = integrate_best_effort(f, 0.0, far_lo.powf(-s), QUAD_OPTS)?;
                total += r.value;
                if r.error > QUAD_OPTS.abs_tol {
                    leftover += r.error;
                }
            } else {
                total += integrate_adaptive(f, 0.0, far_lo.powf(-s), QUAD_OPTS)?.value;
            }
        } else {
            total += log_segment(gamma, g, far_lo, band.hi)?;
        }
    }
    Ok((total, leftover))
}

fn log_segment(gamma: f64, g: &dyn Fn(f64) -> f64, lo: f64, hi: f64) -> Result<f64> {
    let f = |t: f64| {
        let w = t.exp();
        g(w) * (-gamma * t).exp()
    };
    Ok(integrate_adaptive(f, lo.ln(), hi.ln(), QUAD_OPTS)?.value)
}

#[derive(Debug, Clone, Serialize)]
pub struct TiltedKernelRow {
    pub y: f64,
    pub moment: f64,
    pub m1: f64,
    pub m2: f64,
    /// Partition TV estimate between this `y` and the next grid point.
    pub tv_modulus: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TiltedKernelReport {
    pub alpha: f64,
    pub radius: f64,
    pub rows: Vec<TiltedKernelRow>,
    /// `sup_y ∫ (1 ∧ |x|^{1+α}) Q(y, dx)` over the grid.
    pub bound: f64,
}

impl TiltedKernelReport {
    /// CSV with columns `y,moment,m1,m2,tv_modulus`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "y,moment,m1,m2,tv_modulus")?;
        for r in &self.rows {
            let tv = r.tv_modulus.map(|v| v.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{},{}", r.y, r.moment, r.m1, r.m2, tv)?;
        }
        Ok(())
    }
}

pub fn moment_bound(
    kernel: &JumpKernelSpec,
    k: &TruncationFunction,
    y_grid: &[f64],
) -> Result<TiltedKernelReport> {
    kernel.validate()?;
    let tv = if y_grid.len() >= 2 {
        Some(tv_continuity_modulus(kernel, kernel.alpha, y_grid, None)?)
    } else {
        None
    };
    let mut rows = Vec::with_capacity(y_grid.len());
    for (i, &y) in y_grid.iter().enumerate() {
        let moment = kernel.tilted_moment(y)?;
        let (m1, m2) = kernel.tilted_masses(y, k.radius)?;
        let tv_modulus = tv.as_ref().and_then(|t| t.pairs.get(i).map(|p| p.tv));
        rows.push(TiltedKernelRow {
            y,
            moment,
            m1,
            m2,
            tv_modulus,
        });
    }
    let bound = rows.iter().fold(0.0f64, |m, r| m.max(r.moment));
    Ok(TiltedKernelReport {
        alpha: kernel.alpha,
        radius: k.radius,
        rows,
        bound,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TvPair {
    pub y0: f64,
    pub y1: f64,
    pub tv: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TvReport {
    pub cells: usize,
    pub pairs: Vec<TvPair>,
    pub max: f64,
}

/// Signed cell edges: geometric in `|x|` from 1e-4 to 1e3, 64 cells per
/// side, plus the cells touching 0 and infinity.
pub fn default_partition() -> Vec<f64> {
    let per_side = 64;
    let (lo, hi) = (1e-4f64, 1e3f64);
    let ratio = (hi / lo).powf(1.0 / per_side as f64);
    let pos: Vec<f64> = (0..=per_side).map(|i| lo * ratio.powi(i)).collect();
    let mut edges: Vec<f64> = vec![f64::NEG_INFINITY];
    edges.extend(pos.iter().rev().map(|v| -v));
    edges.push(0.0);
    edges.extend(pos.iter().copied());
    edges.push(f64::INFINITY);
    edges
}

/// Lower bound on the TV distance of the tilted measures at adjacent grid
/// points, from cell masses on a partition of the jump axis.
pub fn tv_continuity_modulus(
    kernel: &JumpKernelSpec,
    alpha: f64,
    y_grid: &[f64],
    x_partition: Option<&[f64]>,
) -> Result<TvReport> {
    let default;
    let edges = match x_partition {
        Some(e) => e,
        None => {
            default = default_partition();
            &default
        }
    };
    let cells = edges.len().saturating_sub(1);
    if cells < 64 || edges.windows(2).any(|p| !(p[1] > p[0])) {
        return Err(LabError::validation(format!(
            "TV partition needs at least 64 increasing cells, got {cells}"
        )));
    }
    let p = 1.0 + alpha;
    let tilt = |w: f64| w.abs().powf(p).min(1.0);
    let cell_masses = |y: f64| -> Result<Vec<f64>> {
        edges
            .windows(2)
            .map(|e| kernel.integrate(y, &tilt, &Region::interval(e[0], e[1]), Orders::new(p, 0.0)))
            .collect()
    };
    let mut prev = cell_masses(y_grid[0])?;
    let mut pairs = Vec::with_capacity(y_grid.len().saturating_sub(1));
    for w in y_grid.windows(2) {
        let next = cell_masses(w[1])?;
        let tv = prev.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        pairs.push(TvPair {
            y0: w[0],
            y1: w[1],
            tv,
        });
        prev = next;
    }
    let max = pairs.iter().fold(0.0f64, |m, p| m.max(p.tv));
    Ok(TvReport { cells, pairs, max })
}

/// Maps a region of `z` (jumps of `h(X)`) to the region of `w` (jumps of
/// `X` from `x`) with `h(x + w) - h(x) = z`. Monotone, so bands map to bands.
fn pull_back_region(h: &HTransform, x: f64, region: &Region) -> Region {
    let inv = |z: f64| {
        if z.is_infinite() {
            z
        } else {
            h.inverse_increment(x, z)
        }
    };
    Region {
        pos: region.pos.map(|b| Band {
            lo: inv(b.lo),
            hi: inv(b.hi),
            ..b
        }),
        neg: region.neg.map(|b| Band {
            lo: -inv(-b.lo),
            hi: -inv(-b.hi),
            ..b
        }),
    }
}

/// `∫_region g(z) F(y, dz)` where `F(y, .)` is the image of `Q(h^{-1}(y), .)`
/// under `w ↦ h(h^{-1}(y) + w) - y`.
pub fn pushforward_f(
    kernel: &JumpKernelSpec,
    h: &HTransform,
    y: f64,
    g: &dyn Fn(f64) -> f64,
    region: &Region,
    orders: Orders,
) -> Result<f64> {
    pushforward_impl(kernel, h, y, g, region, orders, false).map(|(v, _)| v)
}

/// [`pushforward_f`] with lenient tail handling, see
/// [`JumpKernelSpec::integrate_lenient`].
pub fn pushforward_f_lenient(
    kernel: &JumpKernelSpec,
    h: &HTransform,
    y: f64,
    g: &dyn Fn(f64) -> f64,
    region: &Region,
    orders: Orders,
) -> Result<(f64, f64)> {
    pushforward_impl(kernel, h, y, g, region, orders, true)
}

fn pushforward_impl(
    kernel: &JumpKernelSpec,
    h: &HTransform,
    y: f64,
    g: &dyn Fn(f64) -> f64,
    region: &Region,
    orders: Orders,
    lenient: bool,
) -> Result<(f64, f64)> {
    let x = if h.is_identity() { y } else { h.inverse(y)? };
    if let Some(atoms) = kernel.atoms_at(x) {
        let v = atoms
            .iter()
            .map(|&(w, m)| (h.increment(x, w), m))
            .filter(|(z, _)| region.contains(*z))
            .map(|(z, m)| m * g(z))
            .sum();
        return Ok((v, 0.0));
    }
    let w_region = pull_back_region(h, x, region);
    kernel.integrate_impl(x, &|w| g(h.increment(x, w)), &w_region, orders, lenient)
}

/// `b(y)` through the cancellation split: for `|z| <= R / C1` the integrand
/// is written as `-z ∫_0^1 expm1(Σ(h^{-1}(y + a z)) - Σ(h^{-1}(y))) da`
/// (Gauss–Legendre in `a`), beyond it as `k(z) - h'(x) k(w)`.
pub fn drift_correction_b(
    kernel: &JumpKernelSpec,
    h: &HTransform,
    k: &TruncationFunction,
    y: f64,
) -> Result<f64> {
    let x = h.inverse(y)?;
    if kernel.is_empty() {
        return Ok(0.0);
    }
    let hp = h.hprime(x)?;
    let sig_x = h.sigma_ext(x);
    let cut = k.radius / h.inverse_lipschitz();
    let p = 1.0 + kernel.alpha;
    // -z ∫_0^1 expm1(Σ(h^{-1}(y + a z)) - Σ(x)) da, rewritten over
    // u = h^{-1}(y + a z) as -∫_x^{x+w} (h'(x) - h'(u)) du.
    let near = |z: f64| {
        let w = h.inverse_increment(x, z);
        -piecewise_integral(h, x, w, |u| -hp * (sig_x - h.sigma_ext(u)).exp_m1())
    };
    let far = |z: f64| k.eval(z) - hp * k.eval(h.inverse_increment(x, z));
    let inner = pushforward_f(kernel, h, y, &near, &Region::inner(cut), Orders::new(p, p))?;
    let outer = pushforward_f(kernel, h, y, &far, &Region::outer(cut), Orders::new(p, 0.0))?;
    Ok(inner + outer)
}

/// `b(y) = ∫ [k(h(x + w) - h(x)) - h'(x) k(w)] Q(x, dw)` with `x = h^{-1}(y)`,
/// straight from the definition.
pub fn drift_correction_b_direct(
    kernel: &JumpKernelSpec,
    h: &HTransform,
    k: &TruncationFunction,
    y: f64,
) -> Result<f64> {
    let x = h.inverse(y)?;
    if kernel.is_empty() {
        return Ok(0.0);
    }
    let hp = h.hprime(x)?;
    let p = 1.0 + kernel.alpha;
    kernel.integrate(
        x,
        &|w| k.eval(h.increment(x, w)) - hp * k.eval(w),
        &Region::all(),
        Orders::new(p, 0.0),
    )
}

/// `c(y) = σ0(y)²`
pub fn diffusion_c(h: &HTransform, diffusion: &DiffusionSpec, y: f64) -> Result<f64> {
    let s = eval_sigma0(h, diffusion, y)?;
    Ok(s * s)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct JumpOperatorValue {
    pub value: f64,
    /// Part from jumps with `|x| <= R`.
    pub f1: f64,
    /// Part from jumps with `|x| > R`.
    pub f2: f64,
    /// Unresolved quadrature error of the tail (nonzero only for heavy
    /// tails against oscillating test functions).
    pub tail_error: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct JumpOperatorBound {
    pub m1: f64,
    pub m2: f64,
    /// `||f'||_{α, |y|+R}`: sup plus Hölder seminorm, sampled.
    pub derivative_norm: f64,
    /// `||f'||_{α, |y|+R} m1 + (2 ||f||_∞ + ||k||_∞ sup|f'|) m2`
    pub modulus_bound: f64,
}

/// Evaluator of `f = φ ∘ h` and its derivative in x-coordinates.
struct Composed<'a> {
    f: &'a TestFunction,
    h: &'a HTransform,
}

impl Composed<'_> {
    fn prime(&self, x: f64) -> f64 {
        (self.f.phi_prime)(self.h.h_ext(x)) * self.h.hprime_ext(x)
    }

    /// `f(x + w) - f(x)`
    fn diff(&self, x: f64, w: f64) -> f64 {
        let y = self.h.h_ext(x);
        (self.f.phi)(y + self.h.increment(x, w)) - (self.f.phi)(y)
    }

    /// `∫_x^{x+w} (f'(s) - f'(x)) ds` by 16-point Gauss–Legendre on each
    /// piece between grid nodes (where `f'` may have kinks), capped at 64
    /// equal pieces.
    fn remainder(&self, x: f64, w: f64) -> f64 {
        let fx = self.prime(x);
        piecewise_integral(self.h, x, w, |s| self.prime(s) - fx)
    }
}

/// `∫_x^{x+w} g(s) ds` (signed) by 16-point Gauss–Legendre on each piece
/// between grid nodes of `h`, where `Σ` has kinks. Spans of more than
/// [`MAX_PIECES`] cells fall back to that many equal pieces.
const MAX_PIECES: usize = 256;

fn piecewise_integral(h: &HTransform, x: f64, w: f64, g: impl Fn(f64) -> f64) -> f64 {
    let rule = gauss_legendre_16();
    let (a, b) = if w > 0.0 { (x, x + w) } else { (x + w, x) };
    let mut breaks = vec![a];
    if !h.is_identity() {
        let grid = h.grid();
        let i0 = grid.partition_point(|&v| v <= a);
        let i1 = grid.partition_point(|&v| v < b);
        if i1 > i0 && i1 - i0 <= MAX_PIECES {
            breaks.extend_from_slice(&grid[i0..i1]);
        } else if i1 > i0 {
            let n = MAX_PIECES as f64;
            breaks.extend((1..MAX_PIECES).map(|j| a + (b - a) * j as f64 / n));
        }
    }
    breaks.push(b);
    let s: f64 = breaks
        .windows(2)
        .map(|p| rule.integrate(&g, p[0], p[1]))
        .sum();
    if w > 0.0 {
        s
    } else {
        -s
    }
}

fn holder_norm_of_derivative(c: &Composed<'_>, half_width: f64, alpha: f64) -> f64 {
    let n = 400;
    let xs: Vec<f64> = (0..=n)
        .map(|i| -half_width + 2.0 * half_width * i as f64 / n as f64)
        .collect();
    let d: Vec<f64> = xs.iter().map(|&x| c.prime(x)).collect();
    let sup = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut semi = 0.0f64;
    for i in 0..=n {
        for j in i + 1..=n {
            semi = semi.max((d[j] - d[i]).abs() / (xs[j] - xs[i]).powf(alpha));
        }
    }
    semi + sup
}

/// `F^f(y) = ∫ (f(y + x) - f(y) - k(x) f'(y)) Q(y, dx)` for `f = φ ∘ h`,
/// split at the truncation radius `R`. For continuous kernels the inner part
/// integrates `G^f(y, x) |x|^{1+α}` with
/// `G^f(y, x) = sign(x) ∫_0^1 (f'(y + a x) - f'(y)) da / |x|^α`;
/// for discrete kernels `G^f |x|^{1+α} = f(y+x) - f(y) - x f'(y)` is summed
/// directly.
pub fn jump_operator_ff(
    f: &TestFunction,
    h: &HTransform,
    kernel: &JumpKernelSpec,
    k: &TruncationFunction,
    y: f64,
) -> Result<JumpOperatorValue> {
    let c = Composed { f, h };
    let r = k.radius;
    let p = 1.0 + kernel.alpha;
    if kernel.is_empty() {
        return Ok(JumpOperatorValue {
            value: 0.0,
            f1: 0.0,
            f2: 0.0,
            tail_error: 0.0,
        });
    }
    let fy = c.prime(y);
    if let Some(atoms) = kernel.atoms_at(y) {
        let (mut f1, mut f2) = (0.0, 0.0);
        for (x, m) in atoms {
            if x.abs() <= r {
                f1 += m * (c.diff(y, x) - x * fy);
            } else {
                f2 += m * (c.diff(y, x) - k.eval(x) * fy);
            }
        }
        return Ok(JumpOperatorValue {
            value: f1 + f2,
            f1,
            f2,
            tail_error: 0.0,
        });
    }
    // remainder(y, x) = x ∫_0^1 (f'(y + a x) - f'(y)) da, so this is G^f.
    let g_f = |x: f64| c.remainder(y, x) / x.abs().powf(p);
    let f1 = kernel.integrate(
        y,
        &|x| g_f(x) * x.abs().powf(p),
        &Region::inner(r),
        Orders::new(p, p),
    )?;
    let tail_order = if f.bound.is_finite() { 0.0 } else { 1.0 };
    let (f2, tail_error) = kernel.integrate_lenient(
        y,
        &|x| c.diff(y, x) - k.eval(x) * fy,
        &Region::outer(r),
        Orders::new(p, tail_order),
    )?;
    Ok(JumpOperatorValue {
        value: f1 + f2,
        f1,
        f2,
        tail_error,
    })
}

/// The a-priori bound on `|F^f(y)|` in terms of the tilted masses.
pub fn jump_operator_bound(
    f: &TestFunction,
    h: &HTransform,
    kernel: &JumpKernelSpec,
    k: &TruncationFunction,
    y: f64,
) -> Result<JumpOperatorBound> {
    let c = Composed { f, h };
    let (m1, m2) = kernel.tilted_masses(y, k.radius)?;
    let reach = y.abs() + k.radius;
    let derivative_norm = holder_norm_of_derivative(&c, reach, kernel.alpha);
    let sup_fp = (0..=200)
        .map(|i| c.prime(-reach + 2.0 * reach * i as f64 / 200.0).abs())
        .fold(0.0, f64::max);
    let big = if m2 > 0.0 {
        (2.0 * f.bound + k.cap() * sup_fp) * m2
    } else {
        0.0
    };
    Ok(JumpOperatorBound {
        m1,
        m2,
        derivative_norm,
        modulus_bound: derivative_norm * m1 + big,
    })
}

/// `F^f(y)` as one integral of the unsplit integrand.
pub fn jump_operator_unsplit(
    f: &TestFunction,
    h: &HTransform,
    kernel: &JumpKernelSpec,
    k: &TruncationFunction,
    y: f64,
) -> Result<f64> {
    if kernel.is_empty() {
        return Ok(0.0);
    }
    let c = Composed { f, h };
    let fy = c.prime(y);
    let p = 1.0 + kernel.alpha;
    let tail_order = if f.bound.is_finite() { 0.0 } else { 1.0 };
    kernel
        .integrate_lenient(
            y,
            &|x| c.diff(y, x) - k.eval(x) * fy,
            &Region::all(),
            Orders::new(p, tail_order),
        )
        .map(|(v, _)| v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{real_fn, symmetric_grid, SigmaFunction};

    fn linear_h() -> HTransform {
        let sf = SigmaFunction::from_fn(symmetric_grid(6.0, 1200), |x| 0.6 * x).unwrap();
        HTransform::build(&sf).unwrap()
    }

    #[test]
    fn stable_moment_is_eight() {
        let kern = JumpKernelSpec::stable(0.5, 1.0, 0.0);
        let rep = moment_bound(&kern, &TruncationFunction::default(), &[-1.0, 0.0, 2.5]).unwrap();
        for r in &rep.rows {
            assert!((r.moment - 8.0).abs() < 1e-6, "{}", r.moment);
            assert_eq!(r.tv_modulus.unwrap_or(0.0), 0.0);
        }
        assert_eq!(rep.rows[0].moment, rep.rows[2].moment);
    }

    #[test]
    fn stable_moment_diverges_when_alpha_too_small() {
        let kern = JumpKernelSpec::stable(1.5, 1.0, 0.25);
        let r = moment_bound(&kern, &TruncationFunction::default(), &[0.0]);
        assert!(matches!(r, Err(LabError::DivergentMoment(_))));
        let ok = JumpKernelSpec::stable(1.5, 1.0, 0.75)
            .tilted_moment(0.0)
            .unwrap();
        let exact = 2.0 * (1.0 / (1.75 - 1.5) + 1.0 / 1.5);
        assert!((ok - exact).abs() < 1e-8, "{ok} vs {exact}");
    }

    #[test]
    fn unbounded_tail_integrand_is_divergent_for_light_index() {
        let kern = JumpKernelSpec::stable(0.5, 1.0, 0.0);
        let r = kern.integrate(
            0.0,
            &|w: f64| w.abs(),
            &Region::outer(1.0),
            Orders::new(1.0, 1.0),
        );
        assert!(matches!(r, Err(LabError::DivergentMoment(_))));
        let kern = JumpKernelSpec::stable(1.5, 1.0, 1.0);
        let v = kern
            .integrate(
                0.0,
                &|w: f64| w.abs(),
                &Region::outer(1.0),
                Orders::new(1.0, 1.0),
            )
            .unwrap();
        assert!((v - 4.0).abs() < 1e-8);
    }

    #[test]
    fn zero_rate_kernel_has_zero_moment() {
        let kern = JumpKernelSpec::atoms(0.0, vec![(1.0, 1.0)]);
        let rep = moment_bound(&kern, &TruncationFunction::default(), &[0.0, 1.0]).unwrap();
        assert_eq!(rep.bound, 0.0);
    }

    #[test]
    fn zero_atoms_are_rejected() {
        let kern = JumpKernelSpec::atoms(1.0, vec![(0.0, 1.0)]);
        assert!(matches!(kern.validate(), Err(LabError::Validation(_))));
    }

    #[test]
    fn tv_modulus_of_separable_kernel() {
        let law = JumpLaw::Atoms(vec![(0.5, 0.4), (-2.0, 0.6)]);
        let kern = JumpKernelSpec::finite_activity("quad", real_fn(|y| 1.0 + y * y), 10.0, law)
            .with_alpha(0.0);
        let ys = [0.0, 0.5, 1.0];
        let rep = tv_continuity_modulus(&kern, 0.0, &ys, None).unwrap();
        let law_mass = 0.4 * 0.5 + 0.6 * 1.0;
        for p in &rep.pairs {
            let expect = ((1.0 + p.y0 * p.y0) - (1.0 + p.y1 * p.y1)).abs() * law_mass;
            assert!((p.tv - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn tv_modulus_spikes_at_tabulated_discontinuity() {
        let ys = vec![-1.0, 0.0, 0.0, 1.0];
        let rows = vec![
            vec![(1.0, 1.0)],
            vec![(1.0, 1.0)],
            vec![(1.0, 3.0)],
            vec![(1.0, 3.0)],
        ];
        let kern = JumpKernelSpec::tabulated(ys, rows);
        kern.validate().unwrap();
        let grid: Vec<f64> = (-4..=4).map(|i| i as f64 * 0.125 - 0.0625).collect();
        let rep = tv_continuity_modulus(&kern, 1.0, &grid, None).unwrap();
        let spike = rep.pairs.iter().position(|p| p.tv > 1.0).unwrap();
        assert!(rep.pairs[spike].y0 < 0.0 && rep.pairs[spike].y1 > 0.0);
        assert_eq!(rep.pairs.iter().filter(|p| p.tv > 1e-12).count(), 1);
    }

    #[test]
    fn coarse_partition_is_rejected() {
        let kern = JumpKernelSpec::stable(0.5, 1.0, 0.0);
        let edges: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert!(tv_continuity_modulus(&kern, 0.0, &[0.0, 1.0], Some(&edges)).is_err());
    }

    #[test]
    fn pushforward_identity_and_mass() {
        let id = HTransform::identity(5.0);
        let kern = JumpKernelSpec::atoms(2.0, vec![(0.3, 0.5), (-1.2, 0.5)]);
        let g = |z: f64| z.sin();
        let direct = kern
            .integrate(0.5, &g, &Region::all(), Orders::new(1.0, 0.0))
            .unwrap();
        let pushed =
            pushforward_f(&kern, &id, 0.5, &g, &Region::all(), Orders::new(1.0, 0.0)).unwrap();
        assert_eq!(direct, pushed);
        let h = linear_h();
        let mass = pushforward_f(
            &kern,
            &h,
            0.4,
            &|_| 1.0,
            &Region::all(),
            Orders::new(0.0, 0.0),
        )
        .unwrap();
        assert!((mass - 2.0).abs() < 1e-15);
    }

    #[test]
    fn pushforward_relocates_atoms() {
        let h = linear_h();
        let kern = JumpKernelSpec::atoms(1.0, vec![(1.0, 0.3), (-1.0, 0.7)]);
        let y = 0.8;
        let x = h.inverse(y).unwrap();
        let up = h.h(x + 1.0).unwrap() - y;
        let down = h.h(x - 1.0).unwrap() - y;
        let m_up = pushforward_f(
            &kern,
            &h,
            y,
            &|_| 1.0,
            &Region::interval(up - 1e-9, up + 1e-9),
            Orders::new(0.0, 0.0),
        )
        .unwrap();
        let m_down = pushforward_f(
            &kern,
            &h,
            y,
            &|_| 1.0,
            &Region::interval(down - 1e-9, down + 1e-9),
            Orders::new(0.0, 0.0),
        )
        .unwrap();
        assert_eq!(m_up, 0.3);
        assert_eq!(m_down, 0.7);
    }

    #[test]
    fn b_vanishes_for_identity() {
        let id = HTransform::identity(5.0);
        let k = TruncationFunction::default();
        for kern in [
            JumpKernelSpec::atoms(1.0, vec![(0.4, 0.5), (-2.0, 0.5)]),
            JumpKernelSpec::stable(0.5, 1.0, 0.0),
            JumpKernelSpec::stable(1.5, 0.5, 1.0),
        ] {
            for y in [-1.0, 0.0, 0.7] {
                assert_eq!(drift_correction_b(&kern, &id, &k, y).unwrap(), 0.0);
                assert_eq!(drift_correction_b_direct(&kern, &id, &k, y).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn b_two_routes_agree_for_atom() {
        let h = linear_h();
        let k = TruncationFunction::default();
        let kern = JumpKernelSpec::atoms(1.0, vec![(0.1, 1.0)]);
        for y in [-0.8, 0.0, 0.5, 1.1] {
            let a = drift_correction_b(&kern, &h, &k, y).unwrap();
            let b = drift_correction_b_direct(&kern, &h, &k, y).unwrap();
            assert!((a - b).abs() < 1e-8, "y={y}: {a} vs {b}");
            assert!(a.abs() > 1e-4);
        }
    }

    #[test]
    fn b_two_routes_agree_for_stable() {
        let h = linear_h();
        let k = TruncationFunction::default();
        let kern = JumpKernelSpec::stable(0.5, 1.0, 0.0);
        let a = drift_correction_b(&kern, &h, &k, 0.3).unwrap();
        let b = drift_correction_b_direct(&kern, &h, &k, 0.3).unwrap();
        assert!((a - b).abs() < 1e-7, "{a} vs {b}");
    }

    #[test]
    fn jump_operator_unit_atom() {
        let id = HTransform::identity(5.0);
        let kern = JumpKernelSpec::atoms(1.0, vec![(1.0, 1.0)]);
        let v = jump_operator_ff(
            &TestFunction::sin(),
            &id,
            &kern,
            &TruncationFunction::default(),
            0.0,
        )
        .unwrap();
        assert!((v.value - (1f64.sin() - 1.0)).abs() < 1e-14, "{}", v.value);
        let c = jump_operator_ff(
            &TestFunction::constant(3.0),
            &id,
            &kern,
            &TruncationFunction::default(),
            0.4,
        )
        .unwrap();
        assert_eq!(c.value, 0.0);
    }

    #[test]
    fn jump_operator_split_matches_unsplit_for_stable() {
        let id = HTransform::identity(5.0);
        let k = TruncationFunction::default();
        let kern = JumpKernelSpec::stable(0.5, 1.0, 0.0);
        for (f, y) in [
            (TestFunction::sin(), 0.0),
            (TestFunction::cos(), 0.3),
            (TestFunction::tanh(), -0.5),
        ] {
            let split = jump_operator_ff(&f, &id, &kern, &k, y).unwrap();
            let whole = jump_operator_unsplit(&f, &id, &kern, &k, y).unwrap();
            assert!(
                (split.value - whole).abs() < 1e-6,
                "{} vs {whole}",
                split.value
            );
            let bound = jump_operator_bound(&f, &id, &kern, &k, y).unwrap();
            assert!(split.value.abs() <= bound.modulus_bound);
        }
    }

    #[test]
    fn jump_operator_split_matches_unsplit_with_transform() {
        let h = linear_h();
        let k = TruncationFunction::default();
        let law = JumpLaw::Normal {
            mean: 0.2,
            std_dev: 0.9,
        };
        let kern = JumpKernelSpec::finite_activity(
            "normal",
            real_fn(|y: f64| 1.0 + 0.5 * y.sin()),
            1.5,
            law,
        );
        for y in [-0.7, 0.0, 1.3] {
            let split = jump_operator_ff(&TestFunction::arctan(), &h, &kern, &k, y).unwrap();
            let whole = jump_operator_unsplit(&TestFunction::arctan(), &h, &kern, &k, y).unwrap();
            assert!(
                (split.value - whole).abs() < 1e-9,
                "{} vs {whole}",
                split.value
            );
            assert_eq!(split.tail_error, 0.0);
        }
    }

    #[test]
    fn diffusion_c_examples() {
        let h = linear_h();
        let one = DiffusionSpec::constant(1.0);
        let y = h.h(1.0).unwrap();
        assert!((diffusion_c(&h, &one, y).unwrap() - (-1.2f64).exp()).abs() < 1e-12);
        assert_eq!(diffusion_c(&h, &one, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn truncation_rules() {
        let clamp = TruncationFunction::default();
        assert_eq!(clamp.eval(0.3), 0.3);
        assert_eq!(clamp.eval(-4.0), -1.0);
        let ind = TruncationFunction {
            radius: 0.5,
            rule: TruncationRule::Indicator,
        };
        assert_eq!(ind.eval(0.4), 0.4);
        assert_eq!(ind.eval(0.6), 0.0);
        assert!(TruncationFunction {
            radius: 0.0,
            rule: TruncationRule::Clamp
        }
        .validate()
        .is_err());
    }

    #[test]
    fn region_membership() {
        let r = Region::interval(-0.5, 2.0);
        assert!(r.contains(2.0) && !r.contains(-0.5) && r.contains(-0.49) && !r.contains(0.0));
        assert!(Region::outer(1.0).contains(-1.5) && !Region::outer(1.0).contains(1.0));
        assert!(Region::inner(1.0).contains(1.0) && !Region::inner(1.0).contains(0.0));
    }
}
