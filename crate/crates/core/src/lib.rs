//! Kinematic-rectified speculative decoding for 7-DoF robot action tokens.
//!
//! The crate simulates a draft/verify decoding loop over discretized action
//! slices. Rejected draft positions can be filled from a per-DoF Kalman
//! filter, and the relaxed-acceptance threshold follows the kinematic
//! variability of the accepted errors.
//!
//! * [`codec`] maps tokens to actions and back.
//! * [`kinematics`] holds the Kalman bank and the variability measure.
//! * [`specdec`] runs the decoding loop one slice or one episode at a time.
//! * [`threshold`] adapts the acceptance threshold and calibrates it.
//! * [`simenv`] provides synthetic tasks and oracles.
//! * [`harness`] runs suites, models latency and writes results.

pub mod codec;
pub mod error;
pub mod harness;
pub mod kinematics;
pub mod kv;
pub mod simenv;
pub mod specdec;
pub mod threshold;

pub use error::{Error, Result};

// Book chapters are compiled as doc-tests so their snippets stay in sync.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/codec.md")]
    mod codec {}
    #[doc = include_str!("../../../book/src/kalman.md")]
    mod kalman {}
    #[doc = include_str!("../../../book/src/decoding.md")]
    mod decoding {}
    #[doc = include_str!("../../../book/src/threshold.md")]
    mod threshold {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/harness.md")]
    mod harness {}
}
