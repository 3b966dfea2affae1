//! Benefit-aware early-exit inference for automatic modulation classification.
//!
//! The crate is organised bottom-up:
//!
//! - [`iqgen`] synthesises labeled 2×128 I/Q frames over an SNR grid.
//! - [`tensornet`] is a small deterministic CPU neural-network engine.
//! - [`backbone`] holds the compact early-exit classifier and its MAC profiler.
//! - [`criteria`] implements the exit scores, percentile thresholds and the exit rule.
//! - [`lbap`] is the recoverability predictor that produces the benefit score.
//! - [`evalrun`] runs the taxonomy, trade-off sweeps and report emitters.
//! - [`pipeline`] wires everything together behind a single run configuration.

pub mod backbone;
pub mod binio;
pub mod criteria;
pub mod evalrun;
pub mod iqgen;
pub mod lbap;
pub mod pipeline;
pub mod tensornet;

/// Number of modulation classes.
pub const NUM_CLASSES: usize = 10;

/// Samples per frame (columns of the 2×128 I/Q matrix).
pub const FRAME_LEN: usize = 128;
