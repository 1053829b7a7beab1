//! Fixtures and independent oracles shared by the integration tests and the
//! acceptance suite.

#![allow(dead_code)]

pub mod grad;
pub mod mutate;
pub mod reference;
pub mod world;
