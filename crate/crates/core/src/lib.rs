//! Structured sequential visual access on a synthetic reasoner.
//!
//! The pipeline: score patches against a query ([`saliency`]), cut the map
//! into a ranked bank of compressed regions ([`regions`]), let a learned
//! policy pick regions one at a time or stop ([`policy`]), run the picks
//! through a frozen toy reasoner ([`envsim`]), and train the policy with
//! curriculum behavior cloning followed by group-relative policy
//! optimization ([`training`]).

pub mod cli;
pub mod envsim;
pub mod error;
pub mod eval;
pub mod netpbm;
pub mod policy;
pub mod numerics;
pub mod regions;
pub mod saliency;
pub mod training;

pub use error::{Error, Result};
