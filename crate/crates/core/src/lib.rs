//! Variational information bottleneck regression for WiFi fingerprint
//! localization, on a small dense-matrix autodiff core.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod knn;
pub mod layers;
pub mod matrix;
pub mod model;
pub mod optim;
pub mod rng;
pub mod runner;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use model::{VibConfig, VibModel};
