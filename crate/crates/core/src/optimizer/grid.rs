use std::cmp::Ordering;

use rayon::prelude::*;

use super::objective::{breakdown_from_counts, count_exits};
use super::{ObjectiveConfig, ThresholdVector};
use crate::error::{Error, Result};
use crate::trace::TraceSet;

/// Default cap on the number of grid combinations.
pub const DEFAULT_GRID_CAP: u128 = 1_000_000;

/// Type-7 quantile (linear interpolation between order statistics) of
/// already-sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per-exit candidate thresholds at the requested quantiles of each non-final
/// exit's confidence distribution, sorted ascending and deduplicated.
pub fn quantile_candidates(traces: &TraceSet, quantiles: &[f64]) -> Result<Vec<Vec<f64>>> {
    if traces.is_empty() {
        return Err(Error::Empty("trace set"));
    }
    if let Some(q) = quantiles.iter().find(|q| !(**q > 0.0 && **q < 1.0)) {
        return Err(Error::InvalidArgument(format!("quantile {q} outside (0,1)")));
    }
    let n = traces.num_exits();
    let candidates = (0..n - 1)
        .map(|exit| {
            let mut confs: Vec<f64> = traces.samples().iter().map(|s| s.confidences[exit]).collect();
            confs.sort_by(f64::total_cmp);
            let mut cands: Vec<f64> = quantiles.iter().map(|&q| quantile(&confs, q)).collect();
            cands.sort_by(f64::total_cmp);
            cands.dedup();
            cands
        })
        .collect();
    Ok(candidates)
}

/// Best threshold vector found by exhaustive search.
#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub thresholds: ThresholdVector,
    pub objective: f64,
    pub evaluated: usize,
}

// Higher objective wins; equal objectives prefer the lexicographically
// smaller vector (earlier exits).
fn better(a: (f64, Vec<f64>), b: (f64, Vec<f64>)) -> (f64, Vec<f64>) {
    match a.0.total_cmp(&b.0) {
        Ordering::Greater => a,
        Ordering::Less => b,
        Ordering::Equal => {
            if a.1.partial_cmp(&b.1) == Some(Ordering::Greater) {
                b
            } else {
                a
            }
        }
    }
}

/// Evaluates every combination of per-exit candidates and returns the one
/// maximizing the objective.
pub fn grid_search(
    candidates: &[Vec<f64>],
    traces: &TraceSet,
    cfg: &ObjectiveConfig,
    cap: u128,
) -> Result<GridResult> {
    let n = traces.num_exits();
    if candidates.len() + 1 != n {
        return Err(Error::DimensionMismatch {
            expected: n - 1,
            actual: candidates.len(),
        });
    }
    if candidates.iter().any(Vec::is_empty) {
        return Err(Error::Empty("candidate list"));
    }
    if traces.is_empty() {
        return Err(Error::Empty("trace set"));
    }
    traces.require_labels()?;
    for c in candidates.iter().flatten() {
        if !(0.0..=1.0).contains(c) {
            return Err(Error::InvalidArgument(format!("candidate {c} outside [0,1]")));
        }
    }
    let combinations = candidates
        .iter()
        .try_fold(1u128, |acc, c| acc.checked_mul(c.len() as u128))
        .unwrap_or(u128::MAX);
    if combinations > cap {
        return Err(Error::GridTooLarge { combinations, cap });
    }
    let total = combinations as usize;

    let decode = |mut idx: usize| -> Vec<f64> {
        // last exit varies fastest, so index order is lexicographic order
        let mut tau = vec![0.0; candidates.len()];
        for (slot, cands) in tau.iter_mut().zip(candidates).rev() {
            *slot = cands[idx % cands.len()];
            idx /= cands.len();
        }
        tau
    };

    let (objective, best) = (0..total)
        .into_par_iter()
        .map(|idx| {
            let tau = decode(idx);
            let counts = count_exits(&tau, traces);
            (breakdown_from_counts(&counts, traces, cfg).objective, tau)
        })
        .reduce(|| (f64::NEG_INFINITY, Vec::new()), better);

    Ok(GridResult {
        thresholds: ThresholdVector::new(best)?,
        objective,
        evaluated: total,
    })
}
