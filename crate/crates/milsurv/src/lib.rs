//! File formats, cohort tooling and the cross-validation runner around
//! [`milsurv_core`].

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod report;
pub mod runner;
pub mod splits;
pub mod store;
pub mod synth;

pub use error::{CliError, CliResult};
