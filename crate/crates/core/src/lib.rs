pub mod baselines;
pub mod decay_prior;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod filterbank;
pub mod flow_engine;
pub mod forward_ops;
pub mod refine;
pub mod rng;
pub mod scenario;
pub mod signal;
pub mod solver;
pub mod task;

#[cfg(test)]
mod testutil;

pub use error::{Result, RirError};
pub use signal::SignalBuffer;
