//! Interval and distributional scores.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Real;

pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_GAMMA: f64 = 1.0;

/// Summary scores for one predictive model on one test set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub mmis: f64,
    pub crps: f64,
    pub rmse: f64,
    pub width: f64,
    pub coverage: f64,
    pub alpha: f64,
    pub gamma: f64,
}

/// JSON shape for the baseline score object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineJson {
    pub mis: f64,
    pub crps: f64,
    pub rmse: f64,
    pub width: f64,
    pub coverage: f64,
}

impl From<&ScoreRecord> for BaselineJson {
    fn from(r: &ScoreRecord) -> Self {
        Self { mis: r.mmis, crps: r.crps, rmse: r.rmse, width: r.width, coverage: r.coverage }
    }
}

fn check_alpha_gamma(alpha: f64, gamma: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return invalid(format!("alpha must lie in (0,1), got {alpha}"));
    }
    if !(gamma > 0.0) {
        return invalid(format!("gamma must be positive, got {gamma}"));
    }
    Ok(())
}

/// Modified interval score `γ(U−L) + (2/α)(L−y)₊ + (2/α)(y−U)₊`.
pub fn m_interval_score<T: Real>(l: T, u: T, y: T, alpha: f64, gamma: f64) -> Result<T> {
    check_alpha_gamma(alpha, gamma)?;
    if l > u {
        return invalid(format!("interval lower bound {l} exceeds upper bound {u}"));
    }
    Ok(mis_unchecked(l, u, y, T::lit(2.0 / alpha), T::lit(gamma)))
}

#[inline]
fn mis_unchecked<T: Real>(l: T, u: T, y: T, penalty: T, gamma: T) -> T {
    let mut s = gamma * (u - l);
    if y < l {
        s = s + penalty * (l - y);
    } else if y > u {
        s = s + penalty * (y - u);
    }
    s
}

/// Mean modified interval score over a test set.
pub fn mmis<T: Real>(intervals: &[(T, T)], y: &[T], alpha: f64, gamma: f64) -> Result<T> {
    check_len(intervals.len(), y.len(), "mmis")?;
    check_alpha_gamma(alpha, gamma)?;
    let (pen, g) = (T::lit(2.0 / alpha), T::lit(gamma));
    let mut total = T::zero();
    for (&(l, u), &yi) in intervals.iter().zip(y) {
        if l > u {
            return invalid(format!("interval lower bound {l} exceeds upper bound {u}"));
        }
        total = total + mis_unchecked(l, u, yi, pen, g);
    }
    Ok(total / T::from_usize_lossy(y.len()))
}

fn check_len(a: usize, b: usize, context: &'static str) -> Result<()> {
    if b == 0 {
        return Err(Error::EmptyInput(context));
    }
    if a != b {
        return Err(Error::DimensionMismatch { context, expected: b, found: a });
    }
    Ok(())
}

/// Energy-form CRPS estimate `mean|x−y| − (1/2T²) ΣΣ|x_t − x_s|`.
///
/// The pairwise term uses the sorted identity
/// `ΣΣ|x_t−x_s| = 2 Σ_i (2i − T + 1) x_(i)` (0-based order statistics),
/// so the cost is `O(T log T)`.
pub fn crps_from_samples<T: Real>(samples: &[T], y: T) -> Result<T> {
    let mut sorted = samples.to_vec();
    crps_in_place(&mut sorted, y)
}

/// As [`crps_from_samples`] but sorts the caller's buffer in place.
pub fn crps_in_place<T: Real>(samples: &mut [T], y: T) -> Result<T> {
    let t = samples.len();
    if t < 2 {
        return invalid(format!("CRPS needs at least 2 samples, got {t}"));
    }
    if samples.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("CRPS samples".into()));
    }
    samples.sort_unstable_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    let tf = T::from_usize_lossy(t);
    let mut abs_sum = T::zero();
    let mut pair = T::zero();
    for (i, &x) in samples.iter().enumerate() {
        abs_sum = abs_sum + (x - y).abs();
        let w = T::from_usize_lossy(2 * i + 1) - tf;
        pair = pair + w * x;
    }
    let crps = abs_sum / tf - pair / (tf * tf);
    // The identity is exact in real arithmetic; clamp rounding noise.
    Ok(crps.max(T::zero()))
}

pub fn rmse<T: Real>(pred: &[T], y: &[T]) -> Result<T> {
    check_len(pred.len(), y.len(), "rmse")?;
    let ss: T = pred.iter().zip(y).map(|(&p, &o)| (p - o) * (p - o)).sum();
    Ok((ss / T::from_usize_lossy(y.len())).sqrt())
}

/// Fraction of `y` inside `[L, U]`, endpoints inclusive.
pub fn coverage<T: Real>(intervals: &[(T, T)], y: &[T]) -> Result<T> {
    check_len(intervals.len(), y.len(), "coverage")?;
    let hits = intervals.iter().zip(y).filter(|(&(l, u), &v)| l <= v && v <= u).count();
    Ok(T::from_usize_lossy(hits) / T::from_usize_lossy(y.len()))
}

pub fn mean_width<T: Real>(intervals: &[(T, T)]) -> Result<T> {
    if intervals.is_empty() {
        return Err(Error::EmptyInput("mean_width"));
    }
    let s: T = intervals.iter().map(|&(l, u)| u - l).sum();
    Ok(s / T::from_usize_lossy(intervals.len()))
}

/// All interval metrics plus RMSE; the CRPS is supplied by the caller since it
/// depends on the predictive samples rather than the interval.
pub fn score_record<T: Real>(
    intervals: &[(T, T)],
    point: &[T],
    y: &[T],
    crps: T,
    alpha: f64,
    gamma: f64,
) -> Result<ScoreRecord> {
    Ok(ScoreRecord {
        mmis: mmis(intervals, y, alpha, gamma)?.to_f64_lossy(),
        crps: crps.to_f64_lossy(),
        rmse: rmse(point, y)?.to_f64_lossy(),
        width: mean_width(intervals)?.to_f64_lossy(),
        coverage: coverage(intervals, y)?.to_f64_lossy(),
        alpha,
        gamma,
    })
}
