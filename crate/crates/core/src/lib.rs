//! Spatio-temporal disaggregation of multi-year survey proportions.

pub mod aggregation;
pub mod baselines;
pub mod config;
pub mod dataset;
pub mod design_effect;
pub mod diagnostics;
pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod model;
pub mod posterior;
pub mod simulation;
pub mod special;
pub mod stmra;
