//! Gaussian-process regression: kernels, posterior, likelihood and MAP
//! hyperparameter fitting.

pub mod kernel;
pub mod map;
pub mod model;

pub use kernel::{kernel_eval, Component, Hyperparams, KernelKind};
pub use map::{map_fit, map_objective, Gaussian, HyperPrior, MapFit, MapOptions};
pub use model::{posterior, Dataset, GpModel, Posterior, PosteriorStats};
