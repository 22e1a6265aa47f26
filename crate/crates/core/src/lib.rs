//! Bayesian variable selection for skewed, heteroscedastic responses under
//! transform-both-sides regression models.

pub mod baselines;
pub mod consistency;
pub mod dist;
pub mod error;
pub mod io;
pub mod ks;
pub mod metrics;
pub mod model;
pub mod quad;
pub mod rng;
pub mod samplers;
pub mod simlab;
pub mod transform;

pub use error::{Error, Result};
pub use model::{Dataset, ModelSpec, ParamState, PriorHyper};
pub use transform::Eta;
