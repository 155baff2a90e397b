//! Engine for whole-slide-image survival analysis with multiple instance
//! learning heads.
//!
//! The crate is `no_std` (it needs `alloc`) and carries everything that is
//! pure computation:
//!
//! - [`tape`]: a small dense-matrix reverse-mode autodiff engine,
//! - [`heads`]: MeanMIL, MaxMIL, ABMIL and TransMIL bag networks,
//! - [`survival`]: discrete-time censored NLL, risk scores and the concordance index,
//! - [`features`] / [`milf`]: feature matrices, ensembles and the MILF byte format,
//! - [`cohort`]: time-bin discretization and stratified K-fold splits,
//! - [`optim`] / [`train`]: Adam, early stopping and the per-fold training loop,
//! - [`report`]: fold aggregation into mean ± std tables.
//!
//! File IO, synthetic cohorts, run directories and the command line live in the
//! `milsurv` companion crate.
#![no_std]

extern crate alloc;

pub mod cohort;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod heads;
pub mod milf;
pub mod optim;
pub mod params;
pub mod real;
pub mod report;
pub mod rng;
pub mod survival;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{Gradients, ParamId, ParamKind, ParamStore};
pub use real::Real;
pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::{Shape, Tensor};
