//! MC-dropout predictive inference: repeated stochastic passes, the three
//! total-variance constructions and `μ ± kσ` intervals.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::io::fmt;
use crate::nn::{DropoutMasks, Heads, TrainedNet};
use crate::rng;
use crate::scalar::Real;

pub const DEFAULT_PASSES: usize = 500;

const NOISE_STREAM_BASE: u64 = 1 << 32;

/// How aleatoric variance enters the predictive variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tag")]
pub enum UqVariant {
    /// Epistemic only.
    #[serde(rename = "EU")]
    Eu,
    /// Fixed noise `τ⁻¹` with `τ = pℓ²/(2Nλ)`.
    #[serde(rename = "FA")]
    Fa { length_scale: f64, n_train: usize },
    /// Learned per-input variance from the second output head.
    #[serde(rename = "LA")]
    La,
}

impl UqVariant {
    pub fn name(&self) -> &'static str {
        match self {
            UqVariant::Eu => "EU",
            UqVariant::Fa { .. } => "FA",
            UqVariant::La => "LA",
        }
    }

    pub fn heads(&self) -> Heads {
        match self {
            UqVariant::La => Heads::MeanAndLogvar,
            _ => Heads::MeanOnly,
        }
    }
}

/// Raw pass outputs, one row per test point and one column per pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Passes<T> {
    pub mean: Array2<T>,
    /// Per-pass learned variance `σ²_a = exp(log σ²)` (two-headed nets only).
    pub ale_var: Option<Array2<T>>,
    pub dropout_rate: f64,
}

impl<T: Real> Passes<T> {
    pub fn n_points(&self) -> usize {
        self.mean.nrows()
    }

    pub fn n_passes(&self) -> usize {
        self.mean.ncols()
    }
}

/// `T` stochastic forward passes of `net` at every row of the raw inputs
/// `x_star`, with fresh inverted-dropout masks at `dropout_rate` per pass.
/// Test point `i` draws its masks from stream `i` of `seed`, so results do
/// not depend on how points are scheduled across threads.
pub fn predictive_passes<T: Real>(
    net: &TrainedNet<T>,
    x_star: ArrayView2<T>,
    t: usize,
    dropout_rate: f64,
    seed: u64,
) -> Result<Passes<T>> {
    if t < 2 {
        return invalid(format!("need at least 2 passes, got {t}"));
    }
    if !(0.0..1.0).contains(&dropout_rate) {
        return invalid(format!("dropout rate must lie in [0,1), got {dropout_rate}"));
    }
    let p = &net.params;
    let arch = p.arch;
    let xs = net.standardize(x_star);
    if xs.ncols() != arch.input_dim {
        return Err(Error::DimensionMismatch { context: "MC-dropout inputs", expected: arch.input_dim, found: xs.ncols() });
    }
    let rate = T::lit(dropout_rate);
    let scale = T::one() / (T::one() - rate);
    // The first affine layer does not depend on the masks.
    let a1 = (xs.dot(&p.w1.t()) + &p.b1).mapv(|v| v.max(T::zero()));
    let two_heads = arch.heads == Heads::MeanAndLogvar;

    let per_point: Vec<(Array1<T>, Option<Array1<T>>)> = (0..a1.nrows())
        .into_par_iter()
        .map(|i| {
            let mut d1 = a1.row(i).broadcast((t, arch.h1)).expect("broadcast row").to_owned();
            let masks = if dropout_rate > 0.0 {
                let mut r = rng::stream(seed, i as u64);
                Some(DropoutMasks::sample(rate, t, &arch, &mut r))
            } else {
                None
            };
            if let Some(m) = &masks {
                Zip::from(&mut d1).and(&m.m1).for_each(|d, &mk| *d = *d * mk * scale);
            }
            let mut d2 = (d1.dot(&p.w2.t()) + &p.b2).mapv(|v| v.max(T::zero()));
            if let Some(m) = &masks {
                Zip::from(&mut d2).and(&m.m2).for_each(|d, &mk| *d = *d * mk * scale);
            }
            let out = d2.dot(&p.w3.t()) + &p.b3;
            let mean = out.column(0).to_owned();
            let ale = two_heads.then(|| out.column(1).mapv(|s| s.exp()));
            (mean, ale)
        })
        .collect();

    let n = per_point.len();
    let mut mean = Array2::zeros((n, t));
    let mut ale = two_heads.then(|| Array2::zeros((n, t)));
    for (i, (m, a)) in per_point.into_iter().enumerate() {
        mean.row_mut(i).assign(&m);
        if let (Some(dst), Some(src)) = (ale.as_mut(), a) {
            dst.row_mut(i).assign(&src);
        }
    }
    if mean.iter().any(|v| !v.is_finite()) || ale.as_ref().is_some_and(|a| a.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("MC-dropout pass outputs".into()));
    }
    Ok(Passes { mean, ale_var: ale, dropout_rate })
}

/// Model precision `τ = pℓ²/(2Nλ)`; the FA noise variance is `1/τ`.
pub fn fa_precision(dropout_rate: f64, length_scale: f64, n_train: usize, weight_decay: f64) -> Result<f64> {
    if !(weight_decay > 0.0) {
        return invalid(format!("FA precision needs weight decay > 0, got {weight_decay}"));
    }
    if !(dropout_rate > 0.0) {
        return invalid(format!("FA precision needs dropout rate > 0, got {dropout_rate}"));
    }
    if !(length_scale > 0.0) || n_train == 0 {
        return invalid("FA precision needs length scale > 0 and n_train >= 1");
    }
    Ok(dropout_rate * length_scale * length_scale / (2.0 * n_train as f64 * weight_decay))
}

/// Per-point predictive moments. The raw pass outputs stay in [`Passes`].
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveSummary<T> {
    pub mean: Array1<T>,
    pub var_epi: Array1<T>,
    pub var_ale: Array1<T>,
    pub var_tot: Array1<T>,
}

/// Pass mean, population pass variance (divisor `T`) and the aleatoric term
/// for `variant`; LA averages the per-pass learned variances.
pub fn summarize<T: Real>(passes: &Passes<T>, variant: &UqVariant, weight_decay: f64) -> Result<PredictiveSummary<T>> {
    let has_ale = passes.ale_var.is_some();
    if has_ale != (variant.heads() == Heads::MeanAndLogvar) {
        return invalid(format!(
            "{} variant does not match a network {} a variance head",
            variant.name(),
            if has_ale { "with" } else { "without" }
        ));
    }
    let mean = passes.mean.mean_axis(Axis(1)).ok_or(Error::EmptyInput("passes"))?;
    let var_epi = passes.mean.var_axis(Axis(1), T::zero());
    let var_ale = match variant {
        UqVariant::Eu => Array1::zeros(mean.len()),
        UqVariant::Fa { length_scale, n_train } => {
            let tau = fa_precision(passes.dropout_rate, *length_scale, *n_train, weight_decay)?;
            Array1::from_elem(mean.len(), T::lit(1.0 / tau))
        }
        UqVariant::La => passes.ale_var.as_ref().expect("checked above").mean_axis(Axis(1)).expect("non-empty"),
    };
    let var_tot = &var_epi + &var_ale;
    Ok(PredictiveSummary { mean, var_epi, var_ale, var_tot })
}

/// `μ ± k·σ_tot` for every point.
pub fn interval<T: Real>(summary: &PredictiveSummary<T>, k: f64) -> Result<Vec<(T, T)>> {
    if !(k > 0.0) {
        return invalid(format!("interval multiplier must be positive, got {k}"));
    }
    let k = T::lit(k);
    Ok(summary
        .mean
        .iter()
        .zip(&summary.var_tot)
        .map(|(&m, &v)| {
            let h = k * v.max(T::zero()).sqrt();
            (m - h, m + h)
        })
        .collect())
}

/// Predictive samples used for CRPS. EU and FA use the raw passes; LA adds
/// `N(0, σ²_a,t)` noise to pass `t`. Point `i` draws from stream
/// `2³² + i` of `seed`, disjoint from the mask streams of [`predictive_passes`].
pub fn crps_samples_for_variant<T: Real>(passes: &Passes<T>, variant: &UqVariant, seed: u64) -> Result<Array2<T>> {
    if passes.n_passes() < 2 {
        return invalid("need at least 2 passes");
    }
    match variant {
        UqVariant::Eu | UqVariant::Fa { .. } => Ok(passes.mean.clone()),
        UqVariant::La => {
            let ale = passes.ale_var.as_ref().ok_or_else(|| Error::InvalidParameter("LA needs a variance head".into()))?;
            let mut out = passes.mean.clone();
            for (i, (mut row, var)) in out.rows_mut().into_iter().zip(ale.rows()).enumerate() {
                let mut r = rng::stream(seed, NOISE_STREAM_BASE + i as u64);
                for (x, &v) in row.iter_mut().zip(var) {
                    let z: f64 = StandardNormal.sample(&mut r);
                    *x = *x + v.sqrt() * T::lit(z);
                }
            }
            Ok(out)
        }
    }
}

/// Writes `mu,var_epi,var_ale,var_tot,L,U` for multiplier `k`.
pub fn write_summary_csv<T: Real, W: Write>(w: W, summary: &PredictiveSummary<T>, k: f64) -> Result<()> {
    let iv = interval(summary, k)?;
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["mu", "var_epi", "var_ale", "var_tot", "L", "U"])?;
    for (i, &(lo, hi)) in iv.iter().enumerate() {
        wtr.write_record([
            fmt(summary.mean[i]),
            fmt(summary.var_epi[i]),
            fmt(summary.var_ale[i]),
            fmt(summary.var_tot[i]),
            fmt(lo),
            fmt(hi),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
