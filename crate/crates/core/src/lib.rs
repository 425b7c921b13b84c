//! Density-weighted flow matching at desk scale.
//!
//! The crate trains a small neural vector field with the dynamically
//! density-weighted regression loss, samples from it with fixed-step ODE
//! solvers, and evaluates the result with kernel two-sample and smoothness
//! metrics. Two verification labs back the method's geometric story: a 1-D
//! porous-medium / Fokker-Planck solver (finite vs infinite propagation) and
//! a weighted-Laplacian spectral lab (Tikhonov shrinkage, spectral gaps).

pub mod datasets;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod sampler;
pub mod training;
pub mod weights;

pub use error::{Error, Result};
