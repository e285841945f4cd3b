//! Neural mixed effects: neural networks whose parameters are the sum of a
//! generic component shared by all groups and a group-specific delta,
//! trained with a Gaussian penalty on the deltas and epoch-wise updates of
//! the loss scale and delta covariance.

pub mod crf;
pub mod dataset;
pub mod error;
pub mod lme;
pub mod math;
pub mod metrics;
pub mod mlp;
pub mod objective;
pub mod optim;
pub mod params;
pub mod trainer;

pub use error::{NmeError, Result};
