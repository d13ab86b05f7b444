//! Conjugate Bayesian linear regression on the augmented design, sampled by
//! Gibbs, and the empirical-quantile scores that serve as the search baseline.
//!
//! Inverse-gamma convention: `IG(a, b)` has density `∝ x^{−a−1} e^{−b/x}`, so
//! `b` is a scale and `1/τ² ~ Gamma(shape a, rate b)`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{cholesky, solve_lower, solve_lower_transposed, spd_inverse_from_cholesky};
use crate::rng;
use crate::scalar::Real;
use crate::scoring::{crps_in_place, score_record, ScoreRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct BaselinePriors<T> {
    pub beta_mean: Array1<T>,
    pub beta_cov: Array2<T>,
    pub tau2_shape: T,
    pub tau2_scale: T,
}

impl<T: Real> BaselinePriors<T> {
    /// `β ~ N(0, 100·I)`, `τ² ~ IG(2, σ²_train)` with `σ²_train` the training
    /// response variance.
    pub fn standard(dim: usize, train_response_var: T) -> Self {
        Self {
            beta_mean: Array1::zeros(dim),
            beta_cov: Array2::eye(dim) * T::lit(100.0),
            tau2_shape: T::lit(2.0),
            tau2_scale: train_response_var,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.beta_mean.len();
        if self.beta_cov.dim() != (d, d) {
            return Err(Error::DimensionMismatch { context: "prior covariance", expected: d, found: self.beta_cov.nrows() });
        }
        if !(self.tau2_shape > T::zero()) || !(self.tau2_scale > T::zero()) {
            return invalid("inverse-gamma shape and scale must be positive");
        }
        if cholesky(self.beta_cov.view()).is_none() {
            return invalid("prior covariance must be symmetric positive definite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GibbsConfig {
    pub n_iter: usize,
    pub n_burn: usize,
    pub seed: u64,
    /// Starting value for τ²; defaults to the prior scale.
    pub tau2_init: Option<f64>,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        Self { n_iter: 10_000, n_burn: 1_000, seed: 0, tau2_init: None }
    }
}

impl GibbsConfig {
    /// Chain length used for the full-scale study.
    pub fn full_scale(seed: u64) -> Self {
        Self { n_iter: 50_000, n_burn: 5_000, seed, tau2_init: None }
    }
}

/// Kept draws (burn-in discarded, no thinning).
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws<T> {
    /// `n_keep × dim`.
    pub beta: Array2<T>,
    pub tau2: Array1<T>,
    pub n_iter: usize,
    pub n_burn: usize,
}

impl<T: Real> PosteriorDraws<T> {
    pub fn n_keep(&self) -> usize {
        self.tau2.len()
    }

    pub fn beta_mean(&self) -> Array1<T> {
        self.beta.mean_axis(Axis(0)).expect("non-empty draws")
    }

    pub fn beta_sd(&self) -> Array1<T> {
        self.beta.std_axis(Axis(0), T::zero())
    }
}

/// Sufficient statistics shared by every iteration.
struct Conjugate<T> {
    xtx: Array2<T>,
    xtz: Array1<T>,
    prior_prec: Array2<T>,
    prior_prec_mean: Array1<T>,
}

impl<T: Real> Conjugate<T> {
    fn new(x: ArrayView2<T>, z: ArrayView1<T>, priors: &BaselinePriors<T>) -> Result<Self> {
        priors.validate()?;
        if x.ncols() != priors.beta_mean.len() {
            return Err(Error::DimensionMismatch { context: "design columns vs prior", expected: priors.beta_mean.len(), found: x.ncols() });
        }
        if x.nrows() != z.len() {
            return Err(Error::DimensionMismatch { context: "design rows vs response", expected: x.nrows(), found: z.len() });
        }
        let lc = cholesky(priors.beta_cov.view()).expect("validated");
        let prior_prec = spd_inverse_from_cholesky(lc.view());
        let prior_prec_mean = prior_prec.dot(&priors.beta_mean);
        Ok(Self { xtx: x.t().dot(&x), xtz: x.t().dot(&z), prior_prec, prior_prec_mean })
    }

    /// Lower Cholesky factor of `Q = C⁻¹ + XᵀX/τ²` and the mean `Q⁻¹(C⁻¹μ + Xᵀz/τ²)`.
    fn conditional(&self, tau2: T) -> Option<(Array2<T>, Array1<T>)> {
        let inv = T::one() / tau2;
        let q = &self.prior_prec + &(&self.xtx * inv);
        let l = cholesky(q.view())?;
        let rhs = &self.prior_prec_mean + &(&self.xtz * inv);
        let mean = solve_lower_transposed(l.view(), solve_lower(l.view(), rhs.view()).view());
        Some((l, mean))
    }
}

/// Mean and covariance of `β | τ², z` under the conjugate prior.
pub fn conditional_beta_moments<T: Real>(
    x: ArrayView2<T>,
    z: ArrayView1<T>,
    priors: &BaselinePriors<T>,
    tau2: T,
) -> Result<(Array1<T>, Array2<T>)> {
    let c = Conjugate::new(x, z, priors)?;
    let (l, mean) = c.conditional(tau2).ok_or(Error::NotPositiveDefinite { iteration: 0 })?;
    Ok((mean, spd_inverse_from_cholesky(l.view())))
}

/// Alternates `β | τ² ~ N(Q⁻¹(C⁻¹μ + Xᵀz/τ²), Q⁻¹)` and
/// `τ² | β ~ IG(a + n/2, b + RSS/2)`, starting from `τ²`.
pub fn gibbs_sample<T: Real>(
    x: ArrayView2<T>,
    z: ArrayView1<T>,
    priors: &BaselinePriors<T>,
    cfg: &GibbsConfig,
) -> Result<PosteriorDraws<T>> {
    if cfg.n_burn >= cfg.n_iter {
        return invalid(format!("burn-in ({}) must be shorter than the chain ({})", cfg.n_burn, cfg.n_iter));
    }
    let conj = Conjugate::new(x, z, priors)?;
    let n = x.nrows();
    let d = x.ncols();
    let shape = priors.tau2_shape.to_f64_lossy() + 0.5 * n as f64;
    let scale0 = priors.tau2_scale.to_f64_lossy();
    let mut tau2 = cfg.tau2_init.unwrap_or(scale0);
    if !(tau2 > 0.0) {
        return invalid("initial tau2 must be positive");
    }
    let mut rng = rng::stream(cfg.seed, 0);
    let n_keep = cfg.n_iter - cfg.n_burn;
    let mut beta_draws = Array2::zeros((n_keep, d));
    let mut tau2_draws = Array1::zeros(n_keep);

    for it in 0..cfg.n_iter {
        let (l, mean) = conj.conditional(T::lit(tau2)).ok_or(Error::NotPositiveDefinite { iteration: it })?;
        let e = Array1::from_shape_simple_fn(d, || {
            let v: f64 = StandardNormal.sample(&mut rng);
            T::lit(v)
        });
        let beta = mean + solve_lower_transposed(l.view(), e.view());

        let resid = &z - &x.dot(&beta);
        let rss = resid.iter().map(|&r| r * r).sum::<T>().to_f64_lossy();
        let rate = scale0 + 0.5 * rss;
        let precision = Gamma::new(shape, 1.0 / rate)
            .map_err(|e| Error::InvalidParameter(format!("inverse-gamma update: {e}")))?
            .sample(&mut rng);
        tau2 = 1.0 / precision;
        if !tau2.is_finite() || tau2 <= 0.0 {
            return Err(Error::NonFinite(format!("tau2 draw at iteration {it}")));
        }

        if it >= cfg.n_burn {
            let k = it - cfg.n_burn;
            beta_draws.row_mut(k).assign(&beta);
            tau2_draws[k] = T::lit(tau2);
        }
    }
    Ok(PosteriorDraws { beta: beta_draws, tau2: tau2_draws, n_iter: cfg.n_iter, n_burn: cfg.n_burn })
}

/// Predictive samples `X̃_test β⁽ᵗ⁾ + N(0, τ²⁽ᵗ⁾)`: one row per test point,
/// one column per kept draw.
pub fn posterior_predictive<T: Real>(draws: &PosteriorDraws<T>, x_test: ArrayView2<T>, seed: u64) -> Result<Array2<T>> {
    if draws.n_keep() == 0 {
        return Err(Error::EmptyInput("posterior draws"));
    }
    if x_test.ncols() != draws.beta.ncols() {
        return Err(Error::DimensionMismatch { context: "test design columns", expected: draws.beta.ncols(), found: x_test.ncols() });
    }
    let mut out = x_test.dot(&draws.beta.t());
    let mut rng = rng::stream(seed, 1);
    for (mut col, &t2) in out.columns_mut().into_iter().zip(&draws.tau2) {
        let sd = t2.sqrt();
        for v in col.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v = *v + sd * T::lit(e);
        }
    }
    Ok(out)
}

/// Linear-interpolation quantile (`q` in `[0,1]`) of sorted data.
pub fn quantile_sorted<T: Real>(sorted: &[T], q: f64) -> T {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = T::lit(pos - lo as f64);
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Scores predictive samples: intervals from the empirical `(α/2, 1−α/2)`
/// quantiles of each row, point prediction from the row mean, CRPS from the
/// row's samples.
pub fn baseline_scores<T: Real>(pred: ArrayView2<T>, z_test: ArrayView1<T>, alpha: f64, gamma: f64) -> Result<ScoreRecord> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return invalid(format!("alpha must lie in (0,1), got {alpha}"));
    }
    if pred.ncols() < 2 {
        return invalid(format!("need at least 2 predictive samples per row, got {}", pred.ncols()));
    }
    if pred.nrows() != z_test.len() {
        return Err(Error::DimensionMismatch { context: "predictive rows", expected: z_test.len(), found: pred.nrows() });
    }
    let mut intervals = Vec::with_capacity(pred.nrows());
    let mut point = Vec::with_capacity(pred.nrows());
    let mut crps = T::zero();
    let mut buf = Vec::with_capacity(pred.ncols());
    for (row, &y) in pred.rows().into_iter().zip(&z_test) {
        buf.clear();
        buf.extend(row.iter().copied());
        point.push(buf.iter().copied().sum::<T>() / T::from_usize_lossy(buf.len()));
        crps = crps + crps_in_place(&mut buf, y)?;
        intervals.push((quantile_sorted(&buf, alpha / 2.0), quantile_sorted(&buf, 1.0 - alpha / 2.0)));
    }
    let y: Vec<T> = z_test.to_vec();
    let crps = crps / T::from_usize_lossy(y.len().max(1));
    score_record(&intervals, &point, &y, crps, alpha, gamma)
}
