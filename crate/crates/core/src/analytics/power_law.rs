use serde::{Deserialize, Serialize};

use super::curves::LearningCurve;
use crate::error::{Error, Result};

/// Lower end of the exponent search interval.
pub const B_LOWER: f64 = -10.0;
/// Width of the final golden-section bracket.
pub const GOLDEN_TOLERANCE: f64 = 1e-6;

/// `E(n) = a * n^b` with `a >= 0`, `b <= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub a: f64,
    pub b: f64,
    pub rmse: f64,
    pub r2: f64,
    pub n_points: usize,
}

impl PowerLawFit {
    pub fn predict(&self, n: f64) -> f64 {
        self.a * n.powf(self.b)
    }
}

/// Optimal non-negative intercept for a fixed exponent.
fn best_a(points: &[(f64, f64)], b: f64) -> f64 {
    let (num, den) = points.iter().fold((0.0, 0.0), |(num, den), &(n, e)| {
        let x = n.powf(b);
        (num + e * x, den + x * x)
    });
    (num / den).max(0.0)
}

pub fn sse(points: &[(f64, f64)], a: f64, b: f64) -> f64 {
    points.iter().map(|&(n, e)| (e - a * n.powf(b)).powi(2)).sum()
}

fn profile(points: &[(f64, f64)], b: f64) -> (f64, f64) {
    let a = best_a(points, b);
    (sse(points, a, b), a)
}

pub fn fit_power_law(curve: &LearningCurve) -> Result<PowerLawFit> {
    let points: Vec<(f64, f64)> = curve
        .points
        .iter()
        .map(|p| (p.opportunity as f64, p.error_rate))
        .collect();
    fit_points(&points)
}

/// Least squares over `(n, E)` pairs. The exponent is found by golden-section
/// search on the profiled SSE, then compared against `b = 0`.
pub fn fit_points(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    if points.len() < 2 {
        return Err(Error::Precondition(format!(
            "power-law fit needs at least 2 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|&(n, e)| !(n >= 1.0 && n.is_finite() && e.is_finite())) {
        return Err(Error::Precondition("power-law points must have n >= 1 and finite E".into()));
    }

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (B_LOWER, 0.0);
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = profile(points, x1).0;
    let mut f2 = profile(points, x2).0;
    while hi - lo > GOLDEN_TOLERANCE {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = profile(points, x1).0;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = profile(points, x2).0;
        }
    }
    let b_search = (lo + hi) / 2.0;
    let (sse_search, a_search) = profile(points, b_search);
    let (sse_flat, a_flat) = profile(points, 0.0);
    let (a, b, err) = if sse_search < sse_flat {
        (a_search, b_search, sse_search)
    } else {
        (a_flat, 0.0, sse_flat)
    };

    let len = points.len() as f64;
    let mean = points.iter().map(|p| p.1).sum::<f64>() / len;
    let ss_tot: f64 = points.iter().map(|p| (p.1 - mean).powi(2)).sum();
    let r2 = if ss_tot > 0.0 {
        1.0 - err / ss_tot
    } else if err == 0.0 {
        1.0
    } else {
        // Constant data is fit exactly at b = 0, so this branch only sees
        // rounding residue.
        1.0 - err
    };
    Ok(PowerLawFit {
        a,
        b,
        rmse: (err / len).sqrt(),
        r2,
        n_points: points.len(),
    })
}
