//! Interventional distributions of a continuous treatment with an instrument,
//! estimated by a control-function pipeline.

pub mod cdfreg;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod rows;
pub mod stats;

pub use error::{Error, Result};
pub use exec::Execution;
pub use nalgebra::DMatrix;
pub mod pipeline;
pub mod dgp;
pub mod diagnostics;
pub mod metrics;
pub mod copula;
