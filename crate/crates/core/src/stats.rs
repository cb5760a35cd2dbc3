use serde::{Deserialize, Serialize};

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl MeanSe {
    /// |mean - target| expressed in standard errors. Zero spread with an exact
    /// hit counts as 0; zero spread with a miss as infinity.
    pub fn z_score(&self, target: f64) -> f64 {
        let d = (self.mean - target).abs();
        if self.se > 0.0 {
            d / self.se
        } else if d == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }

    pub fn within(&self, target: f64, n_se: f64) -> bool {
        self.z_score(target) < n_se
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

pub fn mean_se(xs: &[f64]) -> MeanSe {
    let n = xs.len();
    MeanSe {
        mean: mean(xs),
        se: if n > 1 {
            (variance(xs) / n as f64).sqrt()
        } else {
            0.0
        },
        n,
    }
}

/// Sample variance with a large-sample standard error,
/// `se^2 = (m4 - s^4) / n`.
pub fn variance_se(xs: &[f64]) -> MeanSe {
    let n = xs.len();
    let m = mean(xs);
    let s2 = variance(xs);
    let m4 = if n > 0 {
        xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n as f64
    } else {
        0.0
    };
    MeanSe {
        mean: s2,
        se: if n > 1 {
            ((m4 - s2 * s2).max(0.0) / n as f64).sqrt()
        } else {
            0.0
        },
        n,
    }
}

/// Difference of two independent estimates, in units of their combined error.
pub fn two_sample_z(a: MeanSe, b: MeanSe) -> f64 {
    let se = (a.se * a.se + b.se * b.se).sqrt();
    let d = (a.mean - b.mean).abs();
    if se > 0.0 {
        d / se
    } else if d == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Ordinary least squares fit `y = a + b x`; returns `(a, b)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len().min(ys.len());
    if n == 0 {
        return (0.0, 0.0);
    }
    let mx = mean(&xs[..n]);
    let my = mean(&ys[..n]);
    let sxx: f64 = xs[..n].iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return (my, 0.0);
    }
    let sxy: f64 = xs[..n]
        .iter()
        .zip(&ys[..n])
        .map(|(x, y)| (x - mx) * (y - my))
        .sum();
    let b = sxy / sxx;
    (my - b * mx, b)
}
