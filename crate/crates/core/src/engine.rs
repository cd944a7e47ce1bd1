//! Replays the difficulty-aware exit rule over a trace.
//!
//! For a sample with difficulty `alpha`, the threshold at exit `i` is
//! `clamp(c_i * tau_i + beta_diff * alpha, 0, 1)`, with `c` taken from the
//! per-class coefficients of the exit-1 prediction when present. The sample
//! leaves at the first exit whose confidence strictly exceeds its threshold,
//! or at the final exit.

use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptive::{AdaptEvent, AdaptiveConfig, AdaptiveManager, CoefficientSet, WindowEntry};
use crate::difficulty::{difficulty_with, DifficultyConfig};
use crate::error::{Error, Result};
use crate::image::load_image;
use crate::metrics::{aggregate, RunReport};
use crate::optimizer::{exit_index, ThresholdVector};
use crate::trace::{ExitProfile, SampleRecord, TraceSet};

/// Base thresholds, coefficients and difficulty sensitivity.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitPolicy {
    pub thresholds: ThresholdVector,
    pub coefficients: CoefficientSet,
    pub beta_diff: f64,
}

impl ExitPolicy {
    pub fn new(thresholds: ThresholdVector, coefficients: CoefficientSet, beta_diff: f64) -> Result<Self> {
        if !(beta_diff >= 0.0 && beta_diff.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "beta_diff {beta_diff} must be non-negative"
            )));
        }
        coefficients.validate(thresholds.len() + 1)?;
        Ok(Self {
            thresholds,
            coefficients,
            beta_diff,
        })
    }

    /// Plain thresholds: unit coefficients and no difficulty term.
    pub fn static_thresholds(thresholds: ThresholdVector) -> Self {
        let n = thresholds.len() + 1;
        Self {
            thresholds,
            coefficients: CoefficientSet::ones(n),
            beta_diff: 0.0,
        }
    }
}

/// Difficulty-adjusted thresholds for one sample.
pub fn effective_thresholds(policy: &ExitPolicy, alpha: f64, class_hint: Option<usize>) -> Vec<f64> {
    effective_with(
        policy.thresholds.values(),
        policy.coefficients.for_class(class_hint),
        policy.beta_diff,
        alpha,
    )
}

fn effective_with(tau: &[f64], coeffs: &[f64], beta_diff: f64, alpha: f64) -> Vec<f64> {
    tau.iter()
        .zip(coeffs)
        .map(|(t, c)| (c * t + beta_diff * alpha).clamp(0.0, 1.0))
        .collect()
}

/// Result of running one sample through the exit rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitOutcome {
    #[serde(rename = "id")]
    pub sample_id: String,
    /// 1-based exit index.
    #[serde(rename = "exit")]
    pub chosen_exit: usize,
    #[serde(rename = "pred")]
    pub prediction: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    #[serde(rename = "thresholds")]
    pub effective_thresholds: Vec<f64>,
    pub time_ms: f64,
    pub energy_mj: f64,
    pub macs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<f64>,
}

/// Applies the exit rule with precomputed thresholds and charges the
/// cumulative costs of the chosen exit.
pub fn decide_exit(sample: &SampleRecord, thresholds: &[f64], profile: &ExitProfile) -> ExitOutcome {
    let i = exit_index(&sample.confidences, thresholds);
    ExitOutcome {
        sample_id: sample.sample_id.clone(),
        chosen_exit: i + 1,
        prediction: sample.predictions[i],
        correct: sample.correct_at(i),
        effective_thresholds: thresholds.to_vec(),
        time_ms: profile.cum_time_ms[i],
        energy_mj: profile.cum_energy_mj[i],
        macs: profile.cum_macs[i],
        difficulty: None,
    }
}

/// Writes one outcome per line.
pub fn write_outcomes(outcomes: &[ExitOutcome], mut sink: impl Write) -> Result<()> {
    for o in outcomes {
        serde_json::to_writer(&mut sink, o)?;
        sink.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_outcomes(source: impl BufRead) -> Result<Vec<ExitOutcome>> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let o: ExitOutcome = serde_json::from_str(&line).map_err(|e| Error::Trace {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(o);
    }
    Ok(out)
}

/// Where per-sample difficulty comes from.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum DifficultySource {
    /// Stored value, else computed from the sample's image.
    #[default]
    Auto,
    Stored,
    Image,
    Constant(f64),
}

#[derive(Debug, Clone, Default)]
pub struct SimOptions {
    /// Enables online coefficient adaptation.
    pub adaptive: Option<AdaptiveConfig>,
    pub difficulty_source: DifficultySource,
    pub difficulty: DifficultyConfig,
    /// Relative image paths are resolved against this directory.
    pub image_root: Option<PathBuf>,
    /// Replays samples in a seeded random order instead of file order.
    pub shuffle_seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct SimulationRun {
    pub outcomes: Vec<ExitOutcome>,
    pub report: RunReport,
    pub final_coefficients: CoefficientSet,
    pub adapt_log: Vec<AdaptEvent>,
}

struct Resolved {
    alpha: Option<f64>,
    overhead_ms: f64,
}

fn resolve_difficulty(sample: &SampleRecord, opts: &SimOptions, beta_diff: f64) -> Result<Resolved> {
    let from_image = |sample: &SampleRecord| -> Result<Option<Resolved>> {
        let Some(path) = &sample.image_ref else {
            return Ok(None);
        };
        let path = match &opts.image_root {
            Some(root) => root.join(path),
            None => PathBuf::from(path),
        };
        let start = Instant::now();
        let img = load_image(&path)?;
        let score = difficulty_with(&img, &opts.difficulty)?;
        Ok(Some(Resolved {
            alpha: Some(score.fused),
            overhead_ms: start.elapsed().as_secs_f64() * 1e3,
        }))
    };
    let stored = |s: &SampleRecord| {
        s.difficulty.map(|a| Resolved {
            alpha: Some(a),
            overhead_ms: 0.0,
        })
    };
    let found = match opts.difficulty_source {
        DifficultySource::Constant(a) => {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::InvalidArgument(format!("difficulty {a} outside [0,1]")));
            }
            Some(Resolved {
                alpha: Some(a),
                overhead_ms: 0.0,
            })
        }
        DifficultySource::Stored => stored(sample),
        DifficultySource::Image => from_image(sample)?,
        DifficultySource::Auto => match stored(sample) {
            Some(r) => Some(r),
            None => from_image(sample)?,
        },
    };
    match found {
        Some(r) => Ok(r),
        None if beta_diff == 0.0 => Ok(Resolved {
            alpha: None,
            overhead_ms: 0.0,
        }),
        None => Err(Error::MissingDifficulty(sample.sample_id.clone())),
    }
}

/// Judges an outcome for the adaptation window. Without a true label, the
/// final exit's prediction serves as pseudo-label when its confidence reaches
/// `cutoff`; otherwise correctness is unknown.
pub fn window_entry(
    sample: &SampleRecord,
    outcome: &ExitOutcome,
    profile: &ExitProfile,
    cutoff: f64,
) -> WindowEntry {
    let exit = outcome.chosen_exit - 1;
    let last = profile.num_exits - 1;
    let reference = sample.true_label.or_else(|| {
        (sample.confidences[last] >= cutoff).then_some(sample.predictions[last])
    });
    WindowEntry {
        exit: outcome.chosen_exit,
        class: reference.or(Some(outcome.prediction)),
        correct: reference.map(|r| r == outcome.prediction),
        confidence: sample.confidences[exit],
        cost: profile.normalized_cost(exit),
    }
}

/// Runs every sample through the exit rule, optionally adapting coefficients
/// between samples, and aggregates the outcomes.
pub fn simulate(traces: &TraceSet, policy: &ExitPolicy, opts: &SimOptions) -> Result<SimulationRun> {
    let profile = traces.profile();
    policy.thresholds.check_exits(profile.num_exits)?;
    policy.coefficients.validate(profile.num_exits)?;
    if traces.is_empty() {
        return Err(Error::Empty("trace set"));
    }

    let shuffled;
    let traces = match opts.shuffle_seed {
        Some(seed) => {
            let mut order: Vec<usize> = (0..traces.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            shuffled = traces.reordered(&order);
            &shuffled
        }
        None => traces,
    };
    let samples = traces.samples();

    let resolved: Vec<Resolved> = samples
        .par_iter()
        .map(|s| resolve_difficulty(s, opts, policy.beta_diff))
        .collect::<Result<_>>()?;
    let overhead_ms = resolved.iter().map(|r| r.overhead_ms).sum::<f64>() / samples.len() as f64;
    let alpha_of = |r: &Resolved| r.alpha.unwrap_or(0.0);

    let (outcomes, final_coefficients, adapt_log) = match &opts.adaptive {
        None => {
            let outcomes = samples
                .par_iter()
                .zip(&resolved)
                .map(|(s, r)| {
                    let tau = effective_thresholds(policy, alpha_of(r), Some(s.predictions[0]));
                    ExitOutcome {
                        difficulty: r.alpha,
                        ..decide_exit(s, &tau, profile)
                    }
                })
                .collect();
            (outcomes, policy.coefficients.clone(), Vec::new())
        }
        Some(cfg) => {
            let last = profile.num_exits - 1;
            let judgeable = samples.iter().any(|s| {
                s.true_label.is_some() || s.confidences[last] >= cfg.pseudo_label_cutoff
            });
            if !judgeable {
                return Err(Error::InvalidArgument(
                    "adaptation needs labels or confident pseudo-labels".into(),
                ));
            }
            let mut manager = AdaptiveManager::new(cfg.clone(), policy.coefficients.clone())?;
            let mut outcomes = Vec::with_capacity(samples.len());
            for (s, r) in samples.iter().zip(&resolved) {
                let tau = effective_with(
                    policy.thresholds.values(),
                    manager.coefficients().for_class(Some(s.predictions[0])),
                    policy.beta_diff,
                    alpha_of(r),
                );
                let outcome = ExitOutcome {
                    difficulty: r.alpha,
                    ..decide_exit(s, &tau, profile)
                };
                manager.observe(window_entry(s, &outcome, profile, cfg.pseudo_label_cutoff))?;
                outcomes.push(outcome);
            }
            let (coefficients, log) = manager.into_parts();
            (outcomes, coefficients, log)
        }
    };

    let report = aggregate(&outcomes, overhead_ms)?;
    Ok(SimulationRun {
        outcomes,
        report,
        final_coefficients,
        adapt_log,
    })
}
