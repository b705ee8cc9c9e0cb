//! Federated unsupervised domain generalization for remote physiological
//! measurement.
//!
//! Clients hold unlabeled spatio-temporal maps and train a shared model with
//! frequency-domain self-supervision. The server weights client models by a
//! self-similarity consistency score (minimal-bias aggregation) and tracks a
//! von Mises–Fisher summary of client features that clients use to scale
//! their local learning on batches that look unlike the global population.

pub mod config;
pub mod error;
pub mod federation;
pub mod io;
pub mod learner;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod signal;
pub mod synth;
pub mod vmf;

pub use error::{Error, Result};
