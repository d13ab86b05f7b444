//! Two-hidden-layer ReLU network with inverted dropout on the hidden
//! activations, an optional log-variance output, and SGD-with-momentum
//! training driven by hand-written backpropagation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::io;
use crate::linalg::column_moments;
use crate::rng::{self, StreamRng};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heads {
    MeanOnly,
    MeanAndLogvar,
}

impl Heads {
    pub fn outputs(self) -> usize {
        match self {
            Heads::MeanOnly => 1,
            Heads::MeanAndLogvar => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetArchitecture {
    pub input_dim: usize,
    pub h1: usize,
    pub h2: usize,
    pub heads: Heads,
}

/// `h1 = min(2·input_dim, 100)`, `h2 = max(⌊0.8·h1⌋, 16)`.
pub fn architecture(input_dim: usize, heads: Heads) -> NetArchitecture {
    let h1 = (2 * input_dim).min(100);
    let h2 = (h1 * 4 / 5).max(16);
    NetArchitecture { input_dim, h1, h2, heads }
}

/// Weights are stored `(fan_out, fan_in)`; a batch `x` (rows = samples)
/// maps to `x·Wᵀ + b`. For two heads, output row 0 is the mean and row 1 the
/// log variance.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams<T> {
    pub arch: NetArchitecture,
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
    pub w3: Array2<T>,
    pub b3: Array1<T>,
}

impl<T: Real> NetParams<T> {
    pub fn zeros(arch: NetArchitecture) -> Self {
        let o = arch.heads.outputs();
        Self {
            arch,
            w1: Array2::zeros((arch.h1, arch.input_dim)),
            b1: Array1::zeros(arch.h1),
            w2: Array2::zeros((arch.h2, arch.h1)),
            b2: Array1::zeros(arch.h2),
            w3: Array2::zeros((o, arch.h2)),
            b3: Array1::zeros(o),
        }
    }

    /// He-scaled normal weights (`√(2/fan_in)` for the ReLU layers, `√(1/fan_in)`
    /// for the output layer) and zero biases.
    pub fn he_init(arch: NetArchitecture, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(arch);
        let mut fill = |w: &mut Array2<T>, gain: f64| {
            let sd = (gain / w.ncols() as f64).sqrt();
            w.mapv_inplace(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(sd * z)
            });
        };
        fill(&mut p.w1, 2.0);
        fill(&mut p.w2, 2.0);
        fill(&mut p.w3, 1.0);
        p
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len() + self.w3.len() + self.b3.len()
    }

    fn tensors(&self) -> [&[T]; 6] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
            self.w3.as_slice().expect("standard layout"),
            self.b3.as_slice().expect("standard layout"),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [T]; 6] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
            self.w3.as_slice_mut().expect("standard layout"),
            self.b3.as_slice_mut().expect("standard layout"),
        ]
    }

    /// All parameters in the order w1, b1, w2, b2, w3, b3 (row-major).
    pub fn to_flat(&self) -> Vec<T> {
        self.tensors().iter().flat_map(|t| t.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::DimensionMismatch { context: "flat parameter vector", expected: self.n_params(), found: flat.len() });
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[off..off + t.len()]);
            off += t.len();
        }
        Ok(())
    }

    /// `Σ_ℓ ‖W⁽ˡ⁾‖²_F`; biases excluded.
    pub fn weight_sq_norm(&self) -> T {
        [&self.w1, &self.w2, &self.w3].iter().map(|w| w.iter().map(|&v| v * v).sum::<T>()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &ArrayView2<T>) -> Result<()> {
        if x.ncols() != self.arch.input_dim {
            return Err(Error::DimensionMismatch { context: "network input columns", expected: self.arch.input_dim, found: x.ncols() });
        }
        Ok(())
    }
}

/// Bernoulli keep-masks (entries 0 or 1) for the two hidden layers of a
/// batch, together with the dropout rate used for the `1/(1−p)` rescaling.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks<T> {
    pub rate: T,
    pub m1: Array2<T>,
    pub m2: Array2<T>,
}

impl<T: Real> DropoutMasks<T> {
    /// Each unit is dropped independently with probability `rate`.
    pub fn sample(rate: T, rows: usize, arch: &NetArchitecture, rng: &mut impl Rng) -> Self {
        let p = rate.to_f64_lossy();
        let mut draw = |cols: usize| {
            Array2::from_shape_simple_fn((rows, cols), || if rng.random::<f64>() < p { T::zero() } else { T::one() })
        };
        let m1 = draw(arch.h1);
        let m2 = draw(arch.h2);
        Self { rate, m1, m2 }
    }

    pub fn ones(rows: usize, arch: &NetArchitecture) -> Self {
        Self { rate: T::zero(), m1: Array2::ones((rows, arch.h1)), m2: Array2::ones((rows, arch.h2)) }
    }

    fn scale(&self) -> T {
        T::one() / (T::one() - self.rate)
    }
}

/// Network outputs for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub mean: Array1<T>,
    /// Present for the two-headed network.
    pub logvar: Option<Array1<T>>,
}

struct Cache<T> {
    z1: Array2<T>,
    d1: Array2<T>,
    z2: Array2<T>,
    d2: Array2<T>,
    out: Array2<T>,
}

fn affine<T: Real>(x: &ArrayView2<T>, w: &Array2<T>, b: &Array1<T>) -> Array2<T> {
    x.dot(&w.t()) + b
}

fn relu_dropout<T: Real>(z: &Array2<T>, mask: Option<(&Array2<T>, T)>) -> Array2<T> {
    match mask {
        None => z.mapv(|v| v.max(T::zero())),
        Some((m, scale)) => {
            let mut out = Array2::zeros(z.raw_dim());
            Zip::from(&mut out).and(z).and(m).for_each(|o, &v, &mk| *o = v.max(T::zero()) * mk * scale);
            out
        }
    }
}

fn forward_cached<T: Real>(params: &NetParams<T>, x: &ArrayView2<T>, masks: Option<&DropoutMasks<T>>) -> Result<Cache<T>> {
    params.check_input(x)?;
    if let Some(m) = masks {
        if m.m1.dim() != (x.nrows(), params.arch.h1) || m.m2.dim() != (x.nrows(), params.arch.h2) {
            return invalid("dropout mask shape does not match batch and architecture");
        }
    }
    let z1 = affine(x, &params.w1, &params.b1);
    let d1 = relu_dropout(&z1, masks.map(|m| (&m.m1, m.scale())));
    let z2 = affine(&d1.view(), &params.w2, &params.b2);
    let d2 = relu_dropout(&z2, masks.map(|m| (&m.m2, m.scale())));
    let out = affine(&d2.view(), &params.w3, &params.b3);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("network output".into()));
    }
    Ok(Cache { z1, d1, z2, d2, out })
}

fn split_output<T: Real>(out: &Array2<T>, heads: Heads) -> Prediction<T> {
    Prediction {
        mean: out.column(0).to_owned(),
        logvar: (heads == Heads::MeanAndLogvar).then(|| out.column(1).to_owned()),
    }
}

/// Forward pass. Hidden layers use ReLU; when `masks` is given, hidden
/// activations are multiplied by `mask/(1−p)`.
pub fn forward<T: Real>(params: &NetParams<T>, x: ArrayView2<T>, masks: Option<&DropoutMasks<T>>) -> Result<Prediction<T>> {
    let c = forward_cached(params, &x, masks)?;
    Ok(split_output(&c.out, params.arch.heads))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Mse,
    GaussianNll,
}

impl Loss {
    pub fn heads(self) -> Heads {
        match self {
            Loss::Mse => Heads::MeanOnly,
            Loss::GaussianNll => Heads::MeanAndLogvar,
        }
    }
}

/// Batch loss and its gradient with respect to every parameter.
///
/// MSE: `mean (y−ŷ)² + (λ/2) Σ‖W‖²`.
/// Gaussian NLL: `mean[(y−ŷ)²/(2σ²) + ½ log σ²] + (λ/2) Σ‖W‖²`, with
/// `log σ²` the second output.
pub fn loss_and_grad<T: Real>(
    params: &NetParams<T>,
    x: ArrayView2<T>,
    y: ArrayView1<T>,
    masks: Option<&DropoutMasks<T>>,
    loss: Loss,
    weight_decay: T,
) -> Result<(T, NetParams<T>)> {
    let n = x.nrows();
    if n == 0 {
        return Err(Error::EmptyInput("loss batch"));
    }
    if y.len() != n {
        return Err(Error::DimensionMismatch { context: "loss targets", expected: n, found: y.len() });
    }
    if loss.heads() != params.arch.heads {
        return invalid(format!("{loss:?} loss needs a {:?} network", loss.heads()));
    }
    let c = forward_cached(params, &x, masks)?;
    let nf = T::from_usize_lossy(n);
    let half = T::lit(0.5);
    let mut g_out = Array2::zeros(c.out.raw_dim());
    let mut data_loss = T::zero();
    match loss {
        Loss::Mse => {
            for i in 0..n {
                let r = c.out[(i, 0)] - y[i];
                data_loss = data_loss + r * r;
                g_out[(i, 0)] = T::lit(2.0) * r / nf;
            }
        }
        Loss::GaussianNll => {
            for i in 0..n {
                let r = c.out[(i, 0)] - y[i];
                let s = c.out[(i, 1)];
                let inv = (-s).exp();
                data_loss = data_loss + half * r * r * inv + half * s;
                g_out[(i, 0)] = r * inv / nf;
                g_out[(i, 1)] = half * (T::one() - r * r * inv) / nf;
            }
        }
    }
    let value = data_loss / nf + half * weight_decay * params.weight_sq_norm();
    if !value.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }

    let mut grad = NetParams::zeros(params.arch);
    grad.w3 = g_out.t().dot(&c.d2) + &params.w3 * weight_decay;
    grad.b3 = g_out.sum_axis(Axis(0));

    let back = |g_d: Array2<T>, z: &Array2<T>, mask: Option<&Array2<T>>, scale: T| -> Array2<T> {
        let mut g = g_d;
        match mask {
            Some(m) => Zip::from(&mut g).and(z).and(m).for_each(|g, &zv, &mk| {
                *g = if zv > T::zero() { *g * mk * scale } else { T::zero() }
            }),
            None => Zip::from(&mut g).and(z).for_each(|g, &zv| {
                if zv <= T::zero() {
                    *g = T::zero();
                }
            }),
        }
        g
    };
    let scale = masks.map_or(T::one(), |m| m.scale());
    let g_z2 = back(g_out.dot(&params.w3), &c.z2, masks.map(|m| &m.m2), scale);
    grad.w2 = g_z2.t().dot(&c.d1) + &params.w2 * weight_decay;
    grad.b2 = g_z2.sum_axis(Axis(0));
    let g_z1 = back(g_z2.dot(&params.w2), &c.z1, masks.map(|m| &m.m1), scale);
    grad.w1 = g_z1.t().dot(&x) + &params.w1 * weight_decay;
    grad.b1 = g_z1.sum_axis(Axis(0));
    Ok((value, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub dropout_rate: f64,
    pub weight_decay: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: Loss,
    /// Rescale each mini-batch gradient to at most this Euclidean norm.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dropout_rate: 0.1,
            weight_decay: 1e-4,
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 256,
            epochs: 100,
            seed: 0,
            loss: Loss::Mse,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return invalid(format!("dropout rate must lie in [0,1), got {}", self.dropout_rate));
        }
        if !(self.weight_decay >= 0.0) {
            return invalid("weight decay must be non-negative");
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return invalid("learning rate must be positive and momentum in [0,1)");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return invalid("batch size and epochs must be at least 1");
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return invalid("clip_norm must be positive");
        }
        Ok(())
    }
}

/// Column standardisation fitted on training inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer<T> {
    pub mean: Array1<T>,
    pub sd: Array1<T>,
}

impl<T: Real> Standardizer<T> {
    /// Zero-variance columns get unit scale so they map to zero.
    pub fn fit(x: ArrayView2<T>) -> Self {
        let (mean, var) = column_moments(x);
        let sd = var.mapv(|v| if v > T::zero() { v.sqrt() } else { T::one() });
        Self { mean, sd }
    }

    pub fn transform(&self, x: ArrayView2<T>) -> Array2<T> {
        (&x - &self.mean) / &self.sd
    }

    pub fn inverse(&self, x: ArrayView2<T>) -> Array2<T> {
        &x * &self.sd + &self.mean
    }
}

/// A trained network with its input scaling and training history.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedNet<T> {
    pub params: NetParams<T>,
    pub scaler: Standardizer<T>,
    pub config: TrainConfig,
    /// Mean mini-batch loss per epoch.
    pub loss_curve: Vec<f64>,
}

impl<T: Real> TrainedNet<T> {
    /// Deterministic (no dropout) prediction on raw inputs.
    pub fn predict(&self, x: ArrayView2<T>) -> Result<Prediction<T>> {
        forward(&self.params, self.scaler.transform(x).view(), None)
    }

    pub fn standardize(&self, x: ArrayView2<T>) -> Array2<T> {
        self.scaler.transform(x)
    }

    /// Writes `<stem>.bin` (w1, b1, w2, b2, w3, b3, scaler mean, scaler sd as
    /// matrices) and `<stem>.json` (architecture, config, loss curve).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let row = |v: &Array1<T>| v.clone().insert_axis(Axis(0));
        let p = &self.params;
        let mats = [&p.w1, &row(&p.b1), &p.w2, &row(&p.b2), &p.w3, &row(&p.b3), &row(&self.scaler.mean), &row(&self.scaler.sd)]
            .map(|m| m.to_owned());
        io::save_matrices(&dir.join(format!("{stem}.bin")), &mats.iter().collect::<Vec<_>>())?;
        let sidecar = NetSidecar { architecture: p.arch, config: self.config.clone(), loss_curve: self.loss_curve.clone() };
        let mut w = BufWriter::new(File::create(dir.join(format!("{stem}.json")))?);
        serde_json::to_writer_pretty(&mut w, &sidecar)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let sidecar: NetSidecar = serde_json::from_reader(std::io::BufReader::new(File::open(dir.join(format!("{stem}.json")))?))?;
        let mats: Vec<Array2<T>> = io::load_matrices(&dir.join(format!("{stem}.bin")))?;
        if mats.len() != 8 {
            return Err(Error::Malformed { row: 0, message: format!("expected 8 matrices, found {}", mats.len()) });
        }
        let v = |m: &Array2<T>| m.row(0).to_owned();
        let params = NetParams {
            arch: sidecar.architecture,
            w1: mats[0].clone(),
            b1: v(&mats[1]),
            w2: mats[2].clone(),
            b2: v(&mats[3]),
            w3: mats[4].clone(),
            b3: v(&mats[5]),
        };
        let expected = NetParams::<T>::zeros(sidecar.architecture);
        if params.w1.dim() != expected.w1.dim() || params.w2.dim() != expected.w2.dim() || params.w3.dim() != expected.w3.dim() {
            return Err(Error::Malformed { row: 0, message: "weight shapes do not match the architecture".into() });
        }
        Ok(Self {
            params,
            scaler: Standardizer { mean: v(&mats[6]), sd: v(&mats[7]) },
            config: sidecar.config,
            loss_curve: sidecar.loss_curve,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NetSidecar {
    architecture: NetArchitecture,
    config: TrainConfig,
    loss_curve: Vec<f64>,
}

/// Trains on raw inputs `x` (standardised internally with their own column
/// statistics) and unscaled responses `y`.
///
/// Weights start He-initialised; the mean-output bias starts at `mean(y)` and,
/// for the two-headed network, the log-variance bias at `log var(y)`. Each
/// epoch shuffles the rows and draws fresh dropout masks per mini-batch. All
/// randomness comes from `cfg.seed`.
pub fn train<T: Real>(x: ArrayView2<T>, y: ArrayView1<T>, cfg: &TrainConfig) -> Result<TrainedNet<T>> {
    cfg.validate()?;
    let n = x.nrows();
    if n == 0 || y.len() != n {
        return Err(Error::DimensionMismatch { context: "training rows", expected: n, found: y.len() });
    }
    if n < cfg.batch_size {
        return invalid(format!("training rows ({n}) fewer than batch size ({})", cfg.batch_size));
    }
    let scaler = Standardizer::fit(x);
    let xs = scaler.transform(x);
    let arch = architecture(x.ncols(), cfg.loss.heads());

    let mut rng: StreamRng = rng::stream(cfg.seed, 0);
    let mut params = NetParams::he_init(arch, &mut rng);
    let y_mean = y.iter().copied().sum::<T>() / T::from_usize_lossy(n);
    params.b3[0] = y_mean;
    if arch.heads == Heads::MeanAndLogvar {
        let var = y.iter().map(|&v| (v - y_mean) * (v - y_mean)).sum::<T>() / T::from_usize_lossy(n);
        params.b3[1] = var.max(T::lit(1e-12)).ln();
    }

    let rate = T::lit(cfg.dropout_rate);
    let lambda = T::lit(cfg.weight_decay);
    let lr = T::lit(cfg.learning_rate);
    let mom = T::lit(cfg.momentum);
    let mut velocity = vec![T::zero(); params.n_params()];
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let n_batches = n / cfg.batch_size;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        // Incomplete trailing batches are dropped; each epoch still sees a
        // random subset of size n_batches·batch_size.
        for b in 0..n_batches {
            let idx = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let xb = xs.select(Axis(0), idx);
            let yb = y.select(Axis(0), idx);
            let masks = (cfg.dropout_rate > 0.0).then(|| DropoutMasks::sample(rate, idx.len(), &arch, &mut rng));
            let (value, grad) = match loss_and_grad(&params, xb.view(), yb.view(), masks.as_ref(), cfg.loss, lambda) {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => return Err(Error::Divergence { epoch }),
                Err(e) => return Err(e),
            };
            epoch_loss += value.to_f64_lossy();
            let mut g = grad.to_flat();
            if let Some(c) = cfg.clip_norm {
                let norm = g.iter().map(|&v| v * v).sum::<T>().sqrt();
                let c = T::lit(c);
                if norm > c {
                    let f = c / norm;
                    g.iter_mut().for_each(|v| *v = *v * f);
                }
            }
            let mut off = 0;
            for t in params.tensors_mut() {
                for (p, (&gi, v)) in t.iter_mut().zip(g[off..].iter().zip(velocity[off..].iter_mut())) {
                    *v = mom * *v - lr * gi;
                    *p = *p + *v;
                }
                off += t.len();
            }
        }
        let mean_loss = epoch_loss / n_batches as f64;
        if !mean_loss.is_finite() || !params.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        curve.push(mean_loss);
    }
    Ok(TrainedNet { params, scaler, config: cfg.clone(), loss_curve: curve })
}

/// Frobenius norm of all weight matrices.
pub fn weight_norm<T: Real>(params: &NetParams<T>) -> f64 {
    params.weight_sq_norm().to_f64_lossy().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_problem(n: usize, d: usize, seed: u64) -> (Array2<f64>, Array1<f64>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(&mut rng));
        let y = Array1::from_shape_simple_fn(n, || StandardNormal.sample(&mut rng));
        (x, y)
    }

    #[test]
    fn architecture_formulas() {
        let a = architecture(5, Heads::MeanOnly);
        assert_eq!((a.h1, a.h2), (10, 16));
        let a = architecture(60, Heads::MeanOnly);
        assert_eq!((a.h1, a.h2), (100, 80));
        let a = architecture(252, Heads::MeanAndLogvar);
        assert_eq!((a.h1, a.h2), (100, 80));
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = NetParams::<f64>::zeros(architecture(4, Heads::MeanAndLogvar));
        let (x, _) = random_problem(6, 4, 1);
        let out = forward(&p, x.view(), None).unwrap();
        assert!(out.mean.iter().all(|&v| v == 0.0));
        assert!(out.logvar.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_mask_without_dropout_is_identity() {
        let arch = architecture(4, Heads::MeanOnly);
        let p = NetParams::<f64>::he_init(arch, &mut rand_chacha::ChaCha8Rng::seed_from_u64(2));
        let (x, _) = random_problem(6, 4, 3);
        let plain = forward(&p, x.view(), None).unwrap();
        let masked = forward(&p, x.view(), Some(&DropoutMasks::ones(6, &arch))).unwrap();
        assert_eq!(plain, masked);
    }

    #[test]
    fn hand_loss_values() {
        let arch = architecture(3, Heads::MeanAndLogvar);
        let p = NetParams::<f64>::zeros(arch);
        let (x, _) = random_problem(5, 3, 4);
        let y = Array1::zeros(5);
        let (v, g) = loss_and_grad(&p, x.view(), y.view(), None, Loss::GaussianNll, 0.0).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g.b3[0], 0.0);

        let arch = architecture(3, Heads::MeanOnly);
        let p = NetParams::<f64>::zeros(arch);
        let (v, g) = loss_and_grad(&p, x.view(), y.view(), None, Loss::Mse, 0.0).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g.b3[0], 0.0);
        assert!(loss_and_grad(&p, x.view(), y.view(), None, Loss::GaussianNll, 0.0).is_err());
    }

    #[test]
    fn decay_term_excludes_biases() {
        let arch = architecture(2, Heads::MeanOnly);
        let mut p = NetParams::<f64>::zeros(arch);
        p.b1.fill(3.0);
        p.b3.fill(1.0);
        p.w3.fill(2.0);
        assert_eq!(p.weight_sq_norm(), 4.0 * arch.h2 as f64);
    }

    #[test]
    fn flat_round_trip() {
        let arch = architecture(3, Heads::MeanAndLogvar);
        let p = NetParams::<f64>::he_init(arch, &mut rand_chacha::ChaCha8Rng::seed_from_u64(9));
        let mut q = NetParams::zeros(arch);
        q.set_flat(&p.to_flat()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn training_is_deterministic_and_fits_linear_target() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let x = Array2::from_shape_simple_fn((512, 2), || rng.random::<f64>() - 0.5);
        let y = x.column(0).to_owned() + x.column(1);
        let cfg = TrainConfig {
            dropout_rate: 0.0,
            weight_decay: 0.0,
            learning_rate: 1e-2,
            batch_size: 32,
            epochs: 200,
            seed: 4,
            ..TrainConfig::default()
        };
        let net = train(x.view(), y.view(), &cfg).unwrap();
        let pred = net.predict(x.view()).unwrap().mean;
        let rmse = ((&pred - &y).mapv(|v| v * v).mean().unwrap()).sqrt();
        let sd = y.std(0.0);
        assert!(rmse < 0.05 * sd, "rmse {rmse} sd {sd}");
        assert_eq!(net, train(x.view(), y.view(), &cfg).unwrap());
    }

    #[test]
    fn weight_decay_shrinks_weights() {
        let (x, y) = random_problem(256, 4, 21);
        let base = TrainConfig { batch_size: 64, epochs: 30, learning_rate: 1e-2, seed: 1, ..TrainConfig::default() };
        let norms: Vec<f64> = [0.0, 1e-4, 1e-1, 10.0]
            .iter()
            .map(|&wd| weight_norm(&train(x.view(), y.view(), &TrainConfig { weight_decay: wd, ..base.clone() }).unwrap().params))
            .collect();
        assert!(norms.windows(2).all(|w| w[1] <= w[0]), "{norms:?}");
    }

    #[test]
    fn divergence_reports_epoch() {
        let (x, y) = random_problem(64, 3, 5);
        let y = y * 1e6;
        let cfg = TrainConfig { learning_rate: 10.0, batch_size: 16, epochs: 50, dropout_rate: 0.0, ..TrainConfig::default() };
        match train(x.view(), y.view(), &cfg) {
            Err(Error::Divergence { epoch }) => assert!(epoch < 50),
            other => panic!("expected divergence, got {:?}", other.map(|n| n.loss_curve)),
        }
    }

    #[test]
    fn save_and_load_round_trip() {
        let (x, y) = random_problem(64, 3, 6);
        let cfg = TrainConfig { batch_size: 16, epochs: 3, loss: Loss::GaussianNll, ..TrainConfig::default() };
        let net = train(x.view(), y.view(), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        net.save(dir.path(), "net").unwrap();
        let back: TrainedNet<f64> = TrainedNet::load(dir.path(), "net").unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn single_precision_training_runs() {
        let x = Array2::<f32>::from_shape_fn((64, 3), |(i, j)| ((i * 7 + j * 3) % 11) as f32 / 11.0);
        let y = x.column(0).to_owned();
        let cfg = TrainConfig { batch_size: 16, epochs: 5, ..TrainConfig::default() };
        let net = train(x.view(), y.view(), &cfg).unwrap();
        assert_eq!(net.loss_curve.len(), 5);
    }
}
