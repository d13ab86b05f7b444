//! Synthetic data from the spatial linear mixed model
//! `z(s) = x(s)ᵀβ + ω(s) + ε(s)` with a Matérn Gaussian-process field `ω`.

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::cholesky_with_jitter;
use crate::rng;
use crate::scalar::Real;

/// Correlation level that defines the effective range.
pub const EFFECTIVE_RANGE_CORRELATION: f64 = 0.05;

/// Half-integer Matérn smoothness values with closed forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub enum Smoothness {
    Half,
    ThreeHalves,
    FiveHalves,
}

impl Smoothness {
    pub fn nu(self) -> f64 {
        match self {
            Smoothness::Half => 0.5,
            Smoothness::ThreeHalves => 1.5,
            Smoothness::FiveHalves => 2.5,
        }
    }

    /// Correlation as a function of the scaled distance `u = d/ρ`.
    fn correlation<T: Real>(self, u: T) -> T {
        match self {
            Smoothness::Half => (-u).exp(),
            Smoothness::ThreeHalves => {
                let s = T::lit(3.0).sqrt() * u;
                (T::one() + s) * (-s).exp()
            }
            Smoothness::FiveHalves => {
                let s = T::lit(5.0).sqrt() * u;
                (T::one() + s + s * s / T::lit(3.0)) * (-s).exp()
            }
        }
    }
}

impl TryFrom<f64> for Smoothness {
    type Error = Error;

    fn try_from(nu: f64) -> Result<Self> {
        if nu == 0.5 {
            Ok(Smoothness::Half)
        } else if nu == 1.5 {
            Ok(Smoothness::ThreeHalves)
        } else if nu == 2.5 {
            Ok(Smoothness::FiveHalves)
        } else {
            Err(Error::UnsupportedSmoothness(nu))
        }
    }
}

impl From<Smoothness> for f64 {
    fn from(s: Smoothness) -> f64 {
        s.nu()
    }
}

/// Matérn covariance parameters: marginal variance, range and smoothness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaternParams<T> {
    pub sigma2: T,
    pub rho: T,
    pub nu: Smoothness,
}

impl<T: Real> MaternParams<T> {
    pub fn new(sigma2: T, rho: T, nu: Smoothness) -> Result<Self> {
        let p = Self { sigma2, rho, nu };
        p.validate()?;
        Ok(p)
    }

    /// Parameters whose range puts the 0.05 correlation at `effective_range`.
    pub fn from_effective_range(sigma2: T, effective_range: T, nu: Smoothness) -> Result<Self> {
        let rho = effective_range_to_rho(effective_range, nu)?;
        Self::new(sigma2, rho, nu)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > T::zero()) || !self.sigma2.is_finite() {
            return invalid(format!("Matérn sigma2 must be positive, got {}", self.sigma2));
        }
        if !(self.rho > T::zero()) || !self.rho.is_finite() {
            return invalid(format!("Matérn rho must be positive, got {}", self.rho));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> MaternParams<U> {
        MaternParams {
            sigma2: U::lit(self.sigma2.to_f64_lossy()),
            rho: U::lit(self.rho.to_f64_lossy()),
            nu: self.nu,
        }
    }
}

/// Matérn covariance at distance `d`, using the `√(2ν)·d/ρ` scaling.
pub fn matern_cov<T: Real>(d: T, params: &MaternParams<T>) -> T {
    debug_assert!(d >= T::zero());
    if d == T::zero() {
        return params.sigma2;
    }
    params.sigma2 * params.nu.correlation(d / params.rho)
}

/// Range `ρ` at which the unit-variance correlation equals 0.05 at
/// `effective_range`, found by bisection on the scaled distance.
pub fn effective_range_to_rho<T: Real>(effective_range: T, nu: Smoothness) -> Result<T> {
    if !(effective_range > T::zero()) || !effective_range.is_finite() {
        return invalid(format!(
            "effective range must be positive, got {effective_range}"
        ));
    }
    // correlation(u) is strictly decreasing in u; bracket the 0.05 crossing.
    let target = EFFECTIVE_RANGE_CORRELATION;
    let corr = |u: f64| nu.correlation(u);
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while corr(hi) > target {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::NoConvergence {
                what: "effective range bracketing",
                iterations: 20,
            });
        }
    }
    const MAX_ITER: usize = 200;
    for _ in 0..MAX_ITER {
        let mid = 0.5 * (lo + hi);
        if corr(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-10 * hi {
            let u = 0.5 * (lo + hi);
            return Ok(effective_range / T::lit(u));
        }
    }
    Err(Error::NoConvergence {
        what: "effective range bisection",
        iterations: MAX_ITER,
    })
}

fn distance<T: Real>(locations: &ArrayView2<T>, i: usize, j: usize) -> T {
    let dx = locations[(i, 0)] - locations[(j, 0)];
    let dy = locations[(i, 1)] - locations[(j, 1)];
    (dx * dx + dy * dy).sqrt()
}

/// Dense covariance matrix over `locations` (n × 2).
pub fn build_cov_matrix<T: Real>(locations: ArrayView2<T>, params: &MaternParams<T>) -> Result<Array2<T>> {
    params.validate()?;
    let n = locations.nrows();
    if n == 0 {
        return Err(Error::EmptyInput("build_cov_matrix locations"));
    }
    if locations.ncols() != 2 {
        return Err(Error::DimensionMismatch {
            context: "build_cov_matrix coordinate columns",
            expected: 2,
            found: locations.ncols(),
        });
    }
    let mut cov = Array2::zeros((n, n));
    for i in 0..n {
        cov[(i, i)] = params.sigma2;
        for j in 0..i {
            let c = matern_cov(distance(&locations, i, j), params);
            cov[(i, j)] = c;
            cov[(j, i)] = c;
        }
    }
    Ok(cov)
}

/// Draws `ω ~ N(0, Σ)` as `L z`, where `L` is the (jittered) Cholesky factor
/// of the Matérn covariance and `z` comes from the field stream of `seed`.
pub fn simulate_gp<T: Real>(locations: ArrayView2<T>, params: &MaternParams<T>, seed: u64) -> Result<Array1<T>> {
    let cov = build_cov_matrix(locations, params)?;
    let (l, _) = cholesky_with_jitter(cov.view(), params.sigma2)?;
    let mut rng = rng::stream(seed, rng::STREAM_FIELD);
    Ok(correlate(&l, &mut rng))
}

fn correlate<T: Real, R: Rng>(l: &Array2<T>, rng: &mut R) -> Array1<T> {
    let z = Array1::from_iter((0..l.nrows()).map(|_| {
        let v: f64 = StandardNormal.sample(rng);
        T::lit(v)
    }));
    l.dot(&z)
}

/// Data-generating configuration for one simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n_total: usize,
    pub n_train: usize,
    pub beta: Vec<f64>,
    pub covariate_low: f64,
    pub covariate_high: f64,
    /// Nugget variance τ².
    pub noise_var: f64,
    /// Marginal variance σ² of the spatial field.
    pub sigma2: f64,
    pub nu: Smoothness,
    /// Distance at which the field correlation is 0.05.
    pub effective_range: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_total: 2000,
            n_train: 1600,
            beta: vec![1.0, 1.0],
            covariate_low: -0.5,
            covariate_high: 0.5,
            noise_var: 0.05,
            sigma2: 1.0,
            nu: Smoothness::Half,
            effective_range: 0.3,
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_train >= self.n_total {
            return invalid(format!(
                "need 0 < n_train < n_total, got n_train={} n_total={}",
                self.n_train, self.n_total
            ));
        }
        if !(self.noise_var >= 0.0) {
            return invalid("noise_var must be non-negative");
        }
        if !(self.covariate_low < self.covariate_high) {
            return invalid("covariate_low must be below covariate_high");
        }
        self.matern::<f64>().map(|_| ())
    }

    pub fn matern<T: Real>(&self) -> Result<MaternParams<T>> {
        MaternParams::from_effective_range(T::lit(self.sigma2), T::lit(self.effective_range), self.nu)
    }
}

/// Index partition of a dataset into training and test rows (each sorted).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Uniform random partition with `n_train` training rows.
    pub fn random(n_total: usize, n_train: usize, seed: u64) -> Self {
        let mut perm: Vec<usize> = (0..n_total).collect();
        perm.shuffle(&mut rng::stream(seed, rng::STREAM_SPLIT));
        let mut train = perm[..n_train].to_vec();
        let mut test = perm[n_train..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Self { train, test }
    }

    pub fn validate(&self, n_total: usize) -> Result<()> {
        if self.train.len() + self.test.len() != n_total {
            return invalid("split sizes do not add up to the dataset size");
        }
        let mut seen = vec![false; n_total];
        for &i in self.train.iter().chain(&self.test) {
            if i >= n_total {
                return Err(Error::IndexOutOfRange { index: i, len: n_total });
            }
            if seen[i] {
                return invalid(format!("row {i} appears twice in the split"));
            }
            seen[i] = true;
        }
        Ok(())
    }
}

/// Locations, covariates, responses and the train/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialDataset<T> {
    /// n × 2 coordinates.
    pub locations: Array2<T>,
    /// n × p covariates.
    pub x: Array2<T>,
    pub z: Array1<T>,
    /// Latent field, when known (simulated data).
    pub omega: Option<Array1<T>>,
    pub split: Split,
}

impl<T: Real> SpatialDataset<T> {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.ncols()
    }

    pub fn train_x(&self) -> Array2<T> {
        self.x.select(ndarray::Axis(0), &self.split.train)
    }

    pub fn test_x(&self) -> Array2<T> {
        self.x.select(ndarray::Axis(0), &self.split.test)
    }

    pub fn train_z(&self) -> Array1<T> {
        self.z.select(ndarray::Axis(0), &self.split.train)
    }

    pub fn test_z(&self) -> Array1<T> {
        self.z.select(ndarray::Axis(0), &self.split.test)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.z.len();
        for (what, rows) in [("locations", self.locations.nrows()), ("covariates", self.x.nrows())] {
            if rows != n {
                return Err(Error::DimensionMismatch { context: what, expected: n, found: rows });
            }
        }
        if let Some(omega) = &self.omega {
            if omega.len() != n {
                return Err(Error::DimensionMismatch { context: "omega", expected: n, found: omega.len() });
            }
        }
        self.split.validate(n)
    }
}

/// Simulates locations on the unit square, uniform covariates, the Matérn
/// field and Gaussian noise, then splits at random. Each component uses its
/// own stream of `cfg.seed`.
pub fn simulate_dataset<T: Real>(cfg: &SimConfig) -> Result<SpatialDataset<T>> {
    cfg.validate()?;
    let n = cfg.n_total;
    let p = cfg.beta.len();

    let mut loc_rng = rng::stream(cfg.seed, rng::STREAM_LOCATIONS);
    let locations = Array2::from_shape_fn((n, 2), |_| T::lit(loc_rng.random::<f64>()));

    let mut cov_rng = rng::stream(cfg.seed, rng::STREAM_COVARIATES);
    let width = cfg.covariate_high - cfg.covariate_low;
    let x = Array2::from_shape_fn((n, p), |_| {
        T::lit(cfg.covariate_low + width * cov_rng.random::<f64>())
    });

    let omega = simulate_gp(locations.view(), &cfg.matern::<T>()?, cfg.seed)?;

    let mut noise_rng = rng::stream(cfg.seed, rng::STREAM_NOISE);
    let tau = cfg.noise_var.sqrt();
    let beta = Array1::from_iter(cfg.beta.iter().map(|&b| T::lit(b)));
    let mut z = x.dot(&beta) + &omega;
    for zi in z.iter_mut() {
        let e: f64 = StandardNormal.sample(&mut noise_rng);
        *zi = *zi + T::lit(tau * e);
    }

    Ok(SpatialDataset {
        locations,
        x,
        z,
        omega: Some(omega),
        split: Split::random(n, cfg.n_train, cfg.seed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn params(sigma2: f64, rho: f64, nu: Smoothness) -> MaternParams<f64> {
        MaternParams::new(sigma2, rho, nu).unwrap()
    }

    #[test]
    fn covariance_at_zero_is_sigma2() {
        for nu in [Smoothness::Half, Smoothness::ThreeHalves, Smoothness::FiveHalves] {
            assert_eq!(matern_cov(0.0, &params(2.5, 0.3, nu)), 2.5);
        }
    }

    #[test]
    fn exponential_case_by_hand() {
        assert_relative_eq!(
            matern_cov(1.0, &params(1.0, 1.0, Smoothness::Half)),
            (-1.0f64).exp(),
            max_relative = 1e-15
        );
        assert_relative_eq!(matern_cov(1.0, &params(1.0, 1.0, Smoothness::Half)), 0.367879, epsilon = 1e-6);
    }

    #[test]
    fn covariance_vanishes_far_away() {
        let c = matern_cov(1e4, &params(2.0, 0.5, Smoothness::ThreeHalves));
        assert!(c.abs() < 1e-300);
    }

    #[test]
    fn unsupported_smoothness_rejected() {
        assert!(matches!(Smoothness::try_from(1.0), Err(Error::UnsupportedSmoothness(_))));
        let parsed: std::result::Result<Smoothness, _> = serde_json::from_str("0.75");
        assert!(parsed.is_err());
    }

    #[test]
    fn effective_range_inversion() {
        let rho = effective_range_to_rho(0.3, Smoothness::Half).unwrap();
        assert_relative_eq!(rho, 0.3 / 20f64.ln(), max_relative = 1e-9);
        assert_relative_eq!(rho, 0.1001425, epsilon = 1e-7);
        let rho3 = effective_range_to_rho(3.0 * 20f64.ln(), Smoothness::Half).unwrap();
        assert_relative_eq!(rho3, 3.0, max_relative = 1e-9);
        let rho15 = effective_range_to_rho(0.6, Smoothness::ThreeHalves).unwrap();
        let back = matern_cov(0.6, &params(1.0, rho15, Smoothness::ThreeHalves));
        assert_relative_eq!(back, 0.05, max_relative = 1e-8);
        assert!(effective_range_to_rho(0.0, Smoothness::Half).is_err());
    }

    #[test]
    fn covariance_matrix_edge_cases() {
        let one = build_cov_matrix(array![[0.2, 0.3]].view(), &params(1.7, 0.2, Smoothness::Half)).unwrap();
        assert_eq!(one, array![[1.7]]);
        let twin = build_cov_matrix(array![[0.5, 0.5], [0.5, 0.5]].view(), &params(2.0, 0.2, Smoothness::Half)).unwrap();
        assert!(twin.iter().all(|&v| v == 2.0));
        let det = twin[(0, 0)] * twin[(1, 1)] - twin[(0, 1)] * twin[(1, 0)];
        assert_eq!(det, 0.0);
        assert!(cholesky_with_jitter(twin.view(), 2.0).is_ok());
    }

    #[test]
    fn degenerate_variance_gives_vanishing_field() {
        let loc = array![[0.1, 0.1], [0.4, 0.2], [0.9, 0.7]];
        let w = simulate_gp(loc.view(), &params(1e-30, 0.2, Smoothness::Half), 5).unwrap();
        assert!(w.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn gp_draws_are_deterministic() {
        let loc = array![[0.1, 0.1], [0.4, 0.2], [0.9, 0.7]];
        let p = params(1.0, 0.2, Smoothness::ThreeHalves);
        assert_eq!(simulate_gp(loc.view(), &p, 9).unwrap(), simulate_gp(loc.view(), &p, 9).unwrap());
    }

    #[test]
    fn noise_free_dataset_is_linear() {
        let cfg = SimConfig {
            n_total: 50,
            n_train: 40,
            noise_var: 0.0,
            sigma2: 1e-30,
            ..SimConfig::default()
        };
        let ds: SpatialDataset<f64> = simulate_dataset(&cfg).unwrap();
        for i in 0..ds.len() {
            assert!((ds.z[i] - ds.x[(i, 0)] - ds.x[(i, 1)]).abs() < 1e-12);
        }
        assert!(ds.locations.iter().all(|&c| (0.0..=1.0).contains(&c)));
        ds.validate().unwrap();
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = SimConfig { n_train: 2000, ..SimConfig::default() };
        assert!(bad.validate().is_err());
        let bad = SimConfig { covariate_low: 1.0, covariate_high: 0.0, ..SimConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn single_precision_simulation_runs() {
        let cfg = SimConfig { n_total: 30, n_train: 20, ..SimConfig::default() };
        let ds: SpatialDataset<f32> = simulate_dataset(&cfg).unwrap();
        assert_eq!(ds.len(), 30);
    }
}
