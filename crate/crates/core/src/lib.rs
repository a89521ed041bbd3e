//! Few-shot event classification with metric-learning heads over
//! trigger-aware sentence encoders, trained episodically with an optional
//! leave-out auxiliary loss.

pub mod corpus;
pub mod episodes;
pub mod error;
pub mod evalcli;
pub mod model;
pub mod numkernel;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
