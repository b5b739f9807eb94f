//! Benchmarks, property checks and MQAR sweeps over `hybrid-core`.

pub mod checks;
pub mod error;
pub mod meta;
pub mod mqar;
pub mod retrieval;

pub use error::{BenchError, Result};
