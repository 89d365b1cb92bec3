//! Deep-unfolded massive-MIMO detection.
//!
//! The crate provides the uplink system model ([`system_model`]), the
//! classical reference detectors ([`baseline`]), the unfolded
//! interference-cancellation network with its reverse pass ([`unfolded`]),
//! a trainer ([`training`]) and a Monte Carlo BER harness ([`bench`]).

pub mod baseline;
pub mod bench;
pub mod error;
pub mod system_model;
pub mod training;
pub mod unfolded;

pub use error::{Error, Result};
