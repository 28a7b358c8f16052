//! Experiment front-end for the pseudo-marginal samplers in `rrmc`:
//! configuration, execution, persistence, comparison, and diagnostics.

pub mod compare;
pub mod config;
pub mod diagnose;
pub mod output;
pub mod runner;
