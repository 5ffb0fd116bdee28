//! Dual-path missing-data imputation.
//!
//! Each sample is routed between a chained-equations branch ([`mice`]) and
//! an adversarially trained neural branch ([`gain`]). Branch outputs are
//! fused with attention ([`fusion`]) and trained jointly with a downstream
//! binary task ([`training`]).

pub mod data;
pub mod error;
pub mod gain;
pub mod harness;
pub mod masking;
pub mod mice;
pub mod numerics;
pub mod par;
pub mod routing;
pub mod fusion;
pub mod training;

pub use error::{Error, Result};
