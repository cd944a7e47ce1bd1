//! UCB1 over a fixed set of adaptation strategies.
//!
//! ```text
//! UCB_i(t) = mean_i + sqrt(2 ln t / n_i)
//! ```
//!
//! Untried strategies are always selected first.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BanditState {
    counts: Vec<u64>,
    means: Vec<f64>,
    total: u64,
}

impl BanditState {
    pub fn new(strategies: usize) -> Self {
        Self {
            counts: vec![0; strategies],
            means: vec![0.0; strategies],
            total: 0,
        }
    }

    /// State with explicit pull counts and mean rewards.
    pub fn from_parts(counts: Vec<u64>, means: Vec<f64>) -> Result<Self> {
        if counts.len() != means.len() {
            return Err(Error::DimensionMismatch {
                expected: counts.len(),
                actual: means.len(),
            });
        }
        let total = counts.iter().sum();
        Ok(Self {
            counts,
            means,
            total,
        })
    }

    pub fn num_strategies(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Folds one reward into the running mean of `strategy`.
    pub fn update(&mut self, strategy: usize, reward: f64) -> Result<()> {
        let n = self
            .counts
            .get_mut(strategy)
            .ok_or(Error::UnknownStrategy(strategy))?;
        *n += 1;
        let mean = &mut self.means[strategy];
        *mean += (reward - *mean) / *n as f64;
        self.total += 1;
        Ok(())
    }
}

/// Index of the strategy with the highest upper confidence bound; ties go to
/// the lowest index.
pub fn ucb_select(b: &BanditState) -> Result<usize> {
    if b.counts.is_empty() {
        return Err(Error::NoStrategies);
    }
    if let Some(untried) = b.counts.iter().position(|&n| n == 0) {
        return Ok(untried);
    }
    let ln_t = (b.total as f64).ln();
    let mut best = (0, f64::NEG_INFINITY);
    for (i, (&n, &mean)) in b.counts.iter().zip(&b.means).enumerate() {
        let ucb = mean + (2.0 * ln_t / n as f64).sqrt();
        if ucb > best.1 {
            best = (i, ucb);
        }
    }
    Ok(best.0)
}

/// Accuracy/cost trade-off used as the bandit reward.
pub fn strategy_reward(accuracy: f64, mean_normalized_cost: f64, beta_opt: f64) -> f64 {
    accuracy - beta_opt * mean_normalized_cost
}
