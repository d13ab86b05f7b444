// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod linalg;
pub mod rng;
pub mod scalar;
pub mod spatial_sim;
pub mod basis;
pub mod bayes_baseline;
pub mod io;
pub mod scoring;
pub mod cubing;
pub mod nn;
pub mod mc_dropout;
pub mod harness;

pub use error::{Error, Result};

pub type Dataset = spatial_sim::SpatialDataset<f64>;
pub type Dataset32 = spatial_sim::SpatialDataset<f32>;
pub type Basis = basis::BasisSet<f64>;
pub type Basis32 = basis::BasisSet<f32>;
pub type Net = nn::TrainedNet<f64>;
pub type Net32 = nn::TrainedNet<f32>;
pub type Params = nn::NetParams<f64>;
pub type Params32 = nn::NetParams<f32>;
pub type Draws = bayes_baseline::PosteriorDraws<f64>;
