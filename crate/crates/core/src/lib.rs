//! Learned orchestration of expert models and skills.
//!
//! A small factorized policy decides, step by step, whether to think, which
//! model and Level-1 skill to call with which query, and when to answer. It
//! is trained with group-relative policy optimization against synthetic
//! expert oracles, and the crate ships the analysis tools used to check the
//! resulting routing against the oracle.

pub mod analysis;
pub mod environment;
pub mod policy;
#[cfg(feature = "live")]
pub mod live;
pub mod protocol;
pub mod registry;
pub mod rewards;
pub mod rng;
pub mod trainer;
