//! EV-charging environment, offline trajectory datasets, behaviour policies
//! with an exact discretized oracle, and the GNN decision transformer.
pub mod dataset;
pub mod env;
mod error;
pub mod experiments;
pub use error::{CoreError, Result};
pub mod graph;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod policies;
pub mod trainer;
