//! Simulated data, scores and the repeated-realization studies.

pub mod baseline;
pub mod data;
pub mod metrics;
pub mod study;
