//! Seniority-aware seeker→helper recommendation for online health
//! communities.
//!
//! Patients are described by their thread and health-stage histories. A
//! graph-conditioned disentangled sequential VAE splits each history into a
//! time-invariant code, propagated over the seeker/helper graph and used for
//! ranking, and a time-varying trajectory that is pushed to rise with the
//! patient's seniority so that recommended helpers sit above their seekers.

pub mod autodiff;
pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph_prop;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod sparse;
pub mod synth;
pub mod trainer;
pub mod vae;

pub use error::{Error, Result};
