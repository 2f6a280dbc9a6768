//! Simulator for federated active learning on non-IID client data.
//!
//! Clients hold Dirichlet-skewed partitions, train a shared MLP with a
//! class-balanced loss plus distillation from the global model, and pick new
//! samples to annotate by comparing their own and the global model's
//! count-weighted class probabilities.

pub mod dataset;
pub mod error;
pub mod federation;
pub mod harness;
pub mod nn;
pub mod partition;
pub mod rng;
pub mod sampling;

pub use dataset::Dataset;
pub use error::{Error, Result};
