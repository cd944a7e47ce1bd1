//! Joint exit-threshold optimization over calibration traces.
//!
//! The objective for a threshold vector `tau` (one entry per non-final exit) is
//!
//! ```text
//! J(tau) = sum_i pi_i(tau) * (A_i - beta_opt * C_i)
//! ```
//!
//! where `pi_i` is the fraction of samples that leave at exit `i` under the
//! rule "first exit whose confidence strictly exceeds its threshold",
//! `A_i` the accuracy among them and `C_i = cum_macs[i] / cum_macs[N]`.
//!
//! Two solvers are provided: an exhaustive [`grid_search`] over quantile
//! candidates, and an MDP over `(exit, difficulty bin, confidence bin)`
//! states solved by backward induction ([`value_iterate`]) whose policy is
//! collapsed back into a threshold vector by [`extract_thresholds`].

mod grid;
mod mdp;
mod objective;

pub use grid::{grid_search, quantile, quantile_candidates, GridResult, DEFAULT_GRID_CAP};
pub use mdp::{
    build_mdp, extract_thresholds, fixed_point_iterate, value_iterate, Extraction, MdpConfig,
    MdpModel, QTable, SolverConfig,
};
pub use objective::{evaluate_breakdown, evaluate_objective, exit_index, ExitBreakdown};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-exit base thresholds for exits `1..N-1`.
#[derive(Debug, Clone, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ThresholdVector(Vec<f64>);

impl ThresholdVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "threshold {v} outside [0,1]"
            )));
        }
        Ok(Self(values))
    }

    /// Thresholds of 1.0 everywhere: no sample can exit early.
    pub fn never_exit(num_exits: usize) -> Self {
        Self(vec![1.0; num_exits.saturating_sub(1)])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub(crate) fn check_exits(&self, num_exits: usize) -> Result<()> {
        if self.0.len() + 1 != num_exits {
            return Err(Error::DimensionMismatch {
                expected: num_exits - 1,
                actual: self.0.len(),
            });
        }
        Ok(())
    }
}

/// Accuracy/cost trade-off weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub beta_opt: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self { beta_opt: 0.3 }
    }
}

impl ObjectiveConfig {
    pub fn new(beta_opt: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta_opt) {
            return Err(Error::InvalidArgument(format!(
                "beta_opt {beta_opt} outside [0,1]"
            )));
        }
        Ok(Self { beta_opt })
    }
}
