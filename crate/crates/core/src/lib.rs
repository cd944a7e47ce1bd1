//! Difficulty-aware early-exit policy engine.
//!
//! The crate covers the whole offline loop around a multi-exit classifier
//! whose per-exit confidences have been recorded as a trace:
//!
//! - [`difficulty`] scores raw images in `[0,1]`
//! - [`trace`] reads, writes and synthesizes exit traces
//! - [`optimizer`] picks exit thresholds on calibration traces
//! - [`adaptive`] refines per-exit coefficients online
//! - [`engine`] replays the exit decision rule over a trace
//! - [`metrics`] aggregates runs and computes speedup, power and DAES

pub mod error;
pub mod difficulty;
pub mod image;
pub mod adaptive;
pub mod engine;
pub mod metrics;
pub mod optimizer;
pub mod policy;
pub mod trace;

pub use error::{Error, Result};
