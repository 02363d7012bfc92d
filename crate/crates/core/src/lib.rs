//! Exact safety verification of feed-forward ReLU networks cut at a hidden
//! layer, with learned input-property heads, runtime envelope monitoring and
//! statistical reporting.

pub mod abstraction;
pub mod characterizer;
pub mod error;
pub mod lp;
pub mod monitor;
pub mod network;
pub mod stats;
pub mod verifier;

pub use error::{Error, Result};
