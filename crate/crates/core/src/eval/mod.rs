//! Held-out metrics and model diagnostics.

pub mod analysis;
pub mod metrics;
