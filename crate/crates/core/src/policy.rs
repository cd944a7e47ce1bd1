//! JSON policy files.
//!
//! ```json
//! {"thresholds": [0.71, 0.83], "beta_diff": 0.3,
//!  "coefficients": {"global": [1.0, 1.0], "per_class": {"3": [0.9, 1.1]}},
//!  "meta": {"objective": 0.81}}
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::adaptive::CoefficientSet;
use crate::engine::ExitPolicy;
use crate::error::Result;
use crate::optimizer::ThresholdVector;

fn default_beta_diff() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyFile {
    pub thresholds: Vec<f64>,
    #[serde(default = "default_beta_diff")]
    pub beta_diff: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coefficients: Option<CoefficientSet>,
    #[serde(default)]
    pub meta: serde_json::Map<String, serde_json::Value>,
}

impl PolicyFile {
    pub fn from_policy(policy: &ExitPolicy) -> Self {
        Self {
            thresholds: policy.thresholds.values().to_vec(),
            beta_diff: policy.beta_diff,
            coefficients: Some(policy.coefficients.clone()),
            meta: Default::default(),
        }
    }

    /// Missing coefficients default to all ones.
    pub fn to_policy(&self) -> Result<ExitPolicy> {
        let tau = ThresholdVector::new(self.thresholds.clone())?;
        let coeffs = self
            .coefficients
            .clone()
            .unwrap_or_else(|| CoefficientSet::ones(tau.len() + 1));
        ExitPolicy::new(tau, coeffs, self.beta_diff)
    }
}

pub fn read_policy(source: impl Read) -> Result<PolicyFile> {
    let file: PolicyFile = serde_json::from_reader(source)?;
    file.to_policy()?;
    Ok(file)
}

pub fn write_policy(file: &PolicyFile, mut sink: impl Write) -> Result<()> {
    serde_json::to_writer_pretty(&mut sink, file)?;
    sink.write_all(b"\n")?;
    Ok(())
}
