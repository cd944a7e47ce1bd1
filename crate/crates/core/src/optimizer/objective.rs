use serde::Serialize;

use super::{ObjectiveConfig, ThresholdVector};
use crate::error::{Error, Result};
use crate::trace::TraceSet;

/// Index (0-based) of the first exit whose confidence strictly exceeds its
/// threshold, or the final exit.
pub fn exit_index(confidences: &[f64], thresholds: &[f64]) -> usize {
    thresholds
        .iter()
        .zip(confidences)
        .position(|(t, c)| c > t)
        .unwrap_or(confidences.len() - 1)
}

/// Per-exit exit fractions, accuracies and the resulting objective.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExitBreakdown {
    pub exit_fraction: Vec<f64>,
    /// Accuracy among samples leaving at each exit; 0 where none leave.
    pub exit_accuracy: Vec<f64>,
    pub normalized_cost: Vec<f64>,
    pub objective: f64,
}

impl ExitBreakdown {
    /// Overall accuracy of the simulated threshold rule.
    pub fn accuracy(&self) -> f64 {
        self.exit_fraction
            .iter()
            .zip(&self.exit_accuracy)
            .map(|(p, a)| p * a)
            .sum()
    }
}

pub(crate) struct Counts {
    pub exits: Vec<usize>,
    pub correct: Vec<usize>,
}

pub(crate) fn count_exits(thresholds: &[f64], traces: &TraceSet) -> Counts {
    let n = traces.num_exits();
    let mut counts = Counts {
        exits: vec![0; n],
        correct: vec![0; n],
    };
    for s in traces.samples() {
        let i = exit_index(&s.confidences, thresholds);
        counts.exits[i] += 1;
        if s.true_label == Some(s.predictions[i]) {
            counts.correct[i] += 1;
        }
    }
    counts
}

pub(crate) fn breakdown_from_counts(
    counts: &Counts,
    traces: &TraceSet,
    cfg: &ObjectiveConfig,
) -> ExitBreakdown {
    let total = traces.len() as f64;
    let profile = traces.profile();
    let n = profile.num_exits;
    let exit_fraction: Vec<f64> = counts.exits.iter().map(|&c| c as f64 / total).collect();
    let exit_accuracy: Vec<f64> = counts
        .exits
        .iter()
        .zip(&counts.correct)
        .map(|(&e, &c)| if e == 0 { 0.0 } else { c as f64 / e as f64 })
        .collect();
    let normalized_cost: Vec<f64> = (0..n).map(|i| profile.normalized_cost(i)).collect();
    let objective = (0..n)
        .map(|i| exit_fraction[i] * (exit_accuracy[i] - cfg.beta_opt * normalized_cost[i]))
        .sum();
    ExitBreakdown {
        exit_fraction,
        exit_accuracy,
        normalized_cost,
        objective,
    }
}

fn check_inputs(tau: &ThresholdVector, traces: &TraceSet) -> Result<()> {
    tau.check_exits(traces.num_exits())?;
    if traces.is_empty() {
        return Err(Error::Empty("trace set"));
    }
    traces.require_labels()
}

/// Simulates the fixed-threshold rule and returns the full breakdown.
pub fn evaluate_breakdown(
    tau: &ThresholdVector,
    traces: &TraceSet,
    cfg: &ObjectiveConfig,
) -> Result<ExitBreakdown> {
    check_inputs(tau, traces)?;
    let counts = count_exits(tau.values(), traces);
    Ok(breakdown_from_counts(&counts, traces, cfg))
}

/// `J(tau)` on a labelled calibration trace.
pub fn evaluate_objective(
    tau: &ThresholdVector,
    traces: &TraceSet,
    cfg: &ObjectiveConfig,
) -> Result<f64> {
    evaluate_breakdown(tau, traces, cfg).map(|b| b.objective)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{ExitProfile, SampleRecord};

    fn trace(samples: Vec<(Vec<f64>, Vec<usize>, usize)>) -> TraceSet {
        let n = samples[0].0.len();
        let profile = ExitProfile {
            model_name: "m".into(),
            dataset_name: "d".into(),
            num_exits: n,
            num_classes: 3,
            cum_macs: (1..=n).map(|i| i as f64).collect(),
            cum_time_ms: (1..=n).map(|i| i as f64).collect(),
            cum_energy_mj: (1..=n).map(|i| i as f64).collect(),
        };
        let samples = samples
            .into_iter()
            .enumerate()
            .map(|(i, (c, p, l))| SampleRecord {
                sample_id: i.to_string(),
                true_label: Some(l),
                confidences: c,
                predictions: p,
                difficulty: None,
                image_ref: None,
            })
            .collect();
        TraceSet::new(profile, samples).unwrap()
    }

    #[test]
    fn never_exit_early_scores_final_accuracy_minus_full_cost() {
        let t = trace(vec![
            (vec![0.9, 0.95], vec![0, 1], 1),
            (vec![0.2, 0.99], vec![2, 2], 2),
        ]);
        let j = evaluate_objective(&ThresholdVector::never_exit(2), &t, &ObjectiveConfig::default())
            .unwrap();
        assert!((j - 0.7).abs() < 1e-12);
    }

    #[test]
    fn zero_thresholds_exit_everything_first() {
        let t = trace(vec![
            (vec![0.9, 0.95], vec![1, 1], 1),
            (vec![0.2, 0.99], vec![0, 2], 2),
        ]);
        let j = evaluate_objective(
            &ThresholdVector::new(vec![0.0]).unwrap(),
            &t,
            &ObjectiveConfig::default(),
        )
        .unwrap();
        // A_1 = 0.5, C_1 = 0.5
        assert!((j - (0.5 - 0.3 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn threshold_equal_to_confidence_does_not_exit() {
        assert_eq!(exit_index(&[0.6, 0.9, 0.1], &[0.6, 0.5]), 1);
        assert_eq!(exit_index(&[0.5, 0.9, 0.1], &[0.6, 0.8]), 1);
        assert_eq!(exit_index(&[1.0, 1.0, 1.0], &[1.0, 1.0]), 2);
        assert_eq!(exit_index(&[0.3], &[]), 0);
    }

    #[test]
    fn empty_exits_contribute_zero() {
        let t = trace(vec![(vec![0.9, 0.95], vec![1, 1], 1)]);
        let b = evaluate_breakdown(
            &ThresholdVector::new(vec![0.5]).unwrap(),
            &t,
            &ObjectiveConfig::default(),
        )
        .unwrap();
        assert_eq!(b.exit_fraction, vec![1.0, 0.0]);
        assert_eq!(b.exit_accuracy[1], 0.0);
    }

    #[test]
    fn errors_on_mismatch_and_missing_labels() {
        let t = trace(vec![(vec![0.9, 0.95], vec![1, 1], 1)]);
        let cfg = ObjectiveConfig::default();
        assert!(matches!(
            evaluate_objective(&ThresholdVector::new(vec![0.5, 0.5]).unwrap(), &t, &cfg),
            Err(Error::DimensionMismatch { .. })
        ));
        let mut s = t.samples()[0].clone();
        s.true_label = None;
        let unlabeled = TraceSet::new(t.profile().clone(), vec![s]).unwrap();
        assert!(matches!(
            evaluate_objective(&ThresholdVector::never_exit(2), &unlabeled, &cfg),
            Err(Error::MissingLabel(_))
        ));
    }
}
