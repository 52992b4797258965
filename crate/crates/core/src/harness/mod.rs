//! Evaluation, persistence, and experiment orchestration.

pub mod checkpoint;
pub mod eval;
pub mod experiment;
pub mod results;
