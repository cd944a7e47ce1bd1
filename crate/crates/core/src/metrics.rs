//! Run aggregates, relative metrics and the difficulty-aware efficiency score.
//!
//! DAES = accuracy * speedup * power efficiency / (1 + alpha), with speedup
//! `T_static / T_method` and power efficiency `E_static / E_method`.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::engine::ExitOutcome;
use crate::error::{Error, Result};

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")))
    }
}

pub fn speedup(t_static: f64, t_method: f64) -> Result<f64> {
    positive("static time", t_static)?;
    positive("method time", t_method)?;
    Ok(t_static / t_method)
}

/// Average power in watts from millijoules per millisecond.
pub fn power(energy_mj: f64, time_ms: f64) -> Result<f64> {
    positive("time", time_ms)?;
    if !(energy_mj >= 0.0 && energy_mj.is_finite()) {
        return Err(Error::InvalidArgument(format!("energy {energy_mj} must be non-negative")));
    }
    Ok(energy_mj / time_ms)
}

pub fn power_efficiency(e_static: f64, e_method: f64) -> Result<f64> {
    positive("static energy", e_static)?;
    positive("method energy", e_method)?;
    Ok(e_static / e_method)
}

pub fn daes(accuracy: f64, speedup: f64, power_eff: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&accuracy) {
        return Err(Error::InvalidArgument(format!("accuracy {accuracy} outside [0,1]")));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0,1]")));
    }
    positive("speedup", speedup)?;
    positive("power efficiency", power_eff)?;
    Ok(accuracy * speedup * power_eff / (1.0 + alpha))
}

/// Aggregate over one simulated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub samples: usize,
    /// `None` when no outcome could be judged.
    pub accuracy: Option<f64>,
    pub mean_time_ms: f64,
    pub mean_energy_mj: f64,
    pub mean_macs: f64,
    pub mean_power_w: f64,
    /// Fraction of samples leaving at each exit.
    pub exit_histogram: Vec<f64>,
    pub mean_difficulty: Option<f64>,
    /// Mean per-sample time spent computing difficulty from images.
    pub overhead_ms: f64,
}

/// Aggregates outcomes. The exit count is read from the threshold vectors
/// they carry. Costs depend only on the exit taken, so means are formed as
/// `sum_i fraction_i * cost_i`, which is exact when every sample leaves at
/// the same exit.
pub fn aggregate(outcomes: &[ExitOutcome], overhead_ms: f64) -> Result<RunReport> {
    let first = outcomes.first().ok_or(Error::Empty("outcomes"))?;
    let num_exits = first.effective_thresholds.len() + 1;
    let n = outcomes.len() as f64;

    let judged: Vec<bool> = outcomes.iter().filter_map(|o| o.correct).collect();
    let accuracy = (!judged.is_empty())
        .then(|| judged.iter().filter(|c| **c).count() as f64 / judged.len() as f64);

    let mut groups: Vec<Vec<&ExitOutcome>> = vec![Vec::new(); num_exits];
    for o in outcomes {
        if o.effective_thresholds.len() + 1 != num_exits {
            return Err(Error::DimensionMismatch {
                expected: num_exits - 1,
                actual: o.effective_thresholds.len(),
            });
        }
        groups
            .get_mut(o.chosen_exit.wrapping_sub(1))
            .ok_or(Error::DimensionMismatch {
                expected: num_exits,
                actual: o.chosen_exit,
            })?
            .push(o);
    }
    let hist: Vec<f64> = groups.iter().map(|g| g.len() as f64 / n).collect();
    let mean = |cost: fn(&ExitOutcome) -> f64| {
        groups
            .iter()
            .zip(&hist)
            .filter(|(g, _)| !g.is_empty())
            .map(|(g, f)| {
                let c0 = cost(g[0]);
                let per_exit = if g.iter().all(|o| cost(o) == c0) {
                    c0
                } else {
                    g.iter().map(|o| cost(o)).sum::<f64>() / g.len() as f64
                };
                f * per_exit
            })
            .sum::<f64>()
    };

    let alphas: Vec<f64> = outcomes.iter().filter_map(|o| o.difficulty).collect();
    let mean_difficulty =
        (!alphas.is_empty()).then(|| alphas.iter().sum::<f64>() / alphas.len() as f64);

    let mean_time_ms = mean(|o| o.time_ms);
    let mean_energy_mj = mean(|o| o.energy_mj);
    Ok(RunReport {
        samples: outcomes.len(),
        accuracy,
        mean_time_ms,
        mean_energy_mj,
        mean_macs: mean(|o| o.macs),
        mean_power_w: if mean_time_ms > 0.0 { mean_energy_mj / mean_time_ms } else { 0.0 },
        exit_histogram: hist,
        mean_difficulty,
        overhead_ms,
    })
}

/// A method's headline numbers, as read from a summary table or a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub model: String,
    pub method: String,
    pub accuracy: Option<f64>,
    pub time_ms: f64,
    pub energy_mj: f64,
    #[serde(default)]
    pub alpha: Option<f64>,
}

impl MethodSummary {
    pub fn from_report(model: &str, method: &str, r: &RunReport) -> Self {
        Self {
            model: model.into(),
            method: method.into(),
            accuracy: r.accuracy,
            time_ms: r.mean_time_ms,
            energy_mj: r.mean_energy_mj,
            alpha: r.mean_difficulty,
        }
    }
}

/// One output row; relative columns are empty without a baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub method: String,
    pub accuracy: Option<f64>,
    pub time_ms: f64,
    pub energy_mj: f64,
    pub power_w: f64,
    pub speedup: Option<f64>,
    pub power_eff: Option<f64>,
    pub daes: Option<f64>,
    pub mean_alpha: Option<f64>,
}

/// Compares `candidate` against the static `baseline`. The DAES alpha is
/// `alpha_override`, else the candidate's, else the baseline's.
pub fn compare(
    baseline: Option<&MethodSummary>,
    candidate: &MethodSummary,
    alpha_override: Option<f64>,
) -> Result<ComparisonRow> {
    let alpha = alpha_override
        .or(candidate.alpha)
        .or_else(|| baseline.and_then(|b| b.alpha));
    let power_w = power(candidate.energy_mj, candidate.time_ms)?;
    let (s, pe, d) = match baseline {
        None => (None, None, None),
        Some(b) => {
            let s = speedup(b.time_ms, candidate.time_ms)?;
            let pe = power_efficiency(b.energy_mj, candidate.energy_mj)?;
            let d = match (candidate.accuracy, alpha) {
                (Some(acc), Some(a)) => Some(daes(acc, s, pe, a)?),
                (None, _) => None,
                (_, None) => {
                    return Err(Error::InvalidArgument(
                        "DAES needs a difficulty: none stored and no override given".into(),
                    ))
                }
            };
            (Some(s), Some(pe), d)
        }
    };
    Ok(ComparisonRow {
        model: candidate.model.clone(),
        method: candidate.method.clone(),
        accuracy: candidate.accuracy,
        time_ms: candidate.time_ms,
        energy_mj: candidate.energy_mj,
        power_w,
        speedup: s,
        power_eff: pe,
        daes: d,
        mean_alpha: alpha,
    })
}

/// Runs compared pairwise against a static reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: RunReport,
    pub candidate: RunReport,
    pub speedup: f64,
    pub power_efficiency: f64,
    pub daes_baseline: Option<f64>,
    pub daes_candidate: Option<f64>,
}

pub fn compare_runs(
    baseline: &RunReport,
    candidate: &RunReport,
    alpha_override: Option<f64>,
) -> Result<Comparison> {
    let b = MethodSummary::from_report("", "baseline", baseline);
    let c = MethodSummary::from_report("", "candidate", candidate);
    let alpha = alpha_override.or(c.alpha).or(b.alpha);
    let rc = compare(Some(&b), &c, alpha)?;
    let rb = compare(Some(&b), &b, alpha)?;
    Ok(Comparison {
        baseline: baseline.clone(),
        candidate: candidate.clone(),
        speedup: rc.speedup.unwrap_or(1.0),
        power_efficiency: rc.power_eff.unwrap_or(1.0),
        daes_baseline: rb.daes,
        daes_candidate: rc.daes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(Self::Table),
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(Error::InvalidArgument(format!("unknown format {other:?}"))),
        }
    }
}

pub const CSV_HEADER: &str =
    "model,method,accuracy,time_ms,energy_mj,power_w,speedup,power_eff,daes,mean_alpha";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn opt(v: Option<f64>, digits: Option<usize>) -> String {
    match (v, digits) {
        (None, _) => String::new(),
        (Some(v), Some(d)) => format!("{v:.d$}"),
        (Some(v), None) => v.to_string(),
    }
}

/// Renders rows. CSV and table round to 2 decimals (DAES to 3, accuracy as
/// a percentage); JSON keeps full precision.
pub fn render_rows(rows: &[ComparisonRow], format: ReportFormat) -> Result<String> {
    let cells = |r: &ComparisonRow| -> Vec<String> {
        vec![
            r.model.clone(),
            r.method.clone(),
            opt(r.accuracy.map(|a| a * 100.0), Some(2)),
            format!("{:.2}", r.time_ms),
            format!("{:.2}", r.energy_mj),
            format!("{:.2}", r.power_w),
            opt(r.speedup, Some(2)),
            opt(r.power_eff, Some(2)),
            opt(r.daes, Some(3)),
            opt(r.mean_alpha, Some(2)),
        ]
    };
    let mut out = String::new();
    match format {
        ReportFormat::Json => {
            out = serde_json::to_string_pretty(rows)?;
            out.push('\n');
        }
        ReportFormat::Csv => {
            out.push_str(CSV_HEADER);
            out.push('\n');
            for r in rows {
                let line: Vec<String> = cells(r).iter().map(|c| csv_field(c)).collect();
                out.push_str(&line.join(","));
                out.push('\n');
            }
        }
        ReportFormat::Table => {
            let header: Vec<String> = CSV_HEADER.split(',').map(String::from).collect();
            let body: Vec<Vec<String>> = rows.iter().map(cells).collect();
            let widths: Vec<usize> = (0..header.len())
                .map(|i| {
                    body.iter()
                        .map(|r| r[i].len())
                        .chain([header[i].len()])
                        .max()
                        .unwrap_or(0)
                })
                .collect();
            for row in std::iter::once(&header).chain(&body) {
                let mut line = String::new();
                for (i, (c, w)) in row.iter().zip(&widths).enumerate() {
                    if i < 2 {
                        let _ = write!(line, "{c:<w$}  ");
                    } else {
                        let _ = write!(line, "{c:>w$}  ");
                    }
                }
                out.push_str(line.trim_end());
                out.push('\n');
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(exit: usize, correct: Option<bool>, t: f64, e: f64, a: Option<f64>) -> ExitOutcome {
        ExitOutcome {
            sample_id: "x".into(),
            chosen_exit: exit,
            prediction: 0,
            correct,
            effective_thresholds: vec![0.5, 0.5],
            time_ms: t,
            energy_mj: e,
            macs: t * 10.0,
            difficulty: a,
        }
    }

    #[test]
    fn domain_errors() {
        assert!(speedup(0.0, 1.0).is_err());
        assert!(speedup(1.0, -1.0).is_err());
        assert!(power_efficiency(1.0, 0.0).is_err());
        assert!(power(1.0, 0.0).is_err());
        assert!(daes(1.2, 1.0, 1.0, 0.0).is_err());
        assert!(daes(0.9, 1.0, 1.0, 1.5).is_err());
        assert!(daes(0.9, 1.0, f64::NAN, 0.5).is_err());
    }

    #[test]
    fn daes_formula() {
        let d = daes(0.9, 2.0, 1.5, 0.5).unwrap();
        assert!((d - 0.9 * 2.0 * 1.5 / 1.5).abs() < 1e-12);
    }

    #[test]
    fn aggregate_counts() {
        let o = vec![
            outcome(1, Some(true), 1.0, 2.0, Some(0.2)),
            outcome(2, Some(false), 3.0, 6.0, Some(0.4)),
            outcome(2, None, 3.0, 6.0, None),
            outcome(3, Some(true), 5.0, 10.0, None),
        ];
        let r = aggregate(&o, 0.0).unwrap();
        assert_eq!(r.accuracy, Some(2.0 / 3.0));
        assert_eq!(r.exit_histogram, vec![0.25, 0.5, 0.25]);
        assert_eq!(r.mean_time_ms, 3.0);
        assert_eq!(r.mean_power_w, 2.0);
        assert!((r.mean_difficulty.unwrap() - 0.3).abs() < 1e-12);
        assert!(aggregate(&[outcome(4, None, 1.0, 1.0, None)], 0.0).is_err());
    }

    #[test]
    fn compare_without_difficulty_needs_override() {
        let b = MethodSummary {
            model: "m".into(),
            method: "static".into(),
            accuracy: Some(0.9),
            time_ms: 2.0,
            energy_mj: 100.0,
            alpha: None,
        };
        let c = MethodSummary {
            method: "dart".into(),
            time_ms: 1.0,
            energy_mj: 50.0,
            ..b.clone()
        };
        assert!(compare(Some(&b), &c, None).is_err());
        let r = compare(Some(&b), &c, Some(0.5)).unwrap();
        assert_eq!(r.speedup, Some(2.0));
        assert_eq!(r.power_eff, Some(2.0));
        assert!((r.daes.unwrap() - 0.9 * 4.0 / 1.5).abs() < 1e-12);
        let alone = compare(None, &c, None).unwrap();
        assert_eq!(alone.daes, None);
    }

    #[test]
    fn render_csv_rounds() {
        let row = ComparisonRow {
            model: "a,b".into(),
            method: "dart".into(),
            accuracy: Some(0.98974),
            time_ms: 0.123,
            energy_mj: 3.456,
            power_w: 28.1,
            speedup: Some(3.62),
            power_eff: Some(1.5),
            daes: Some(5.35649),
            mean_alpha: None,
        };
        let s = render_rows(&[row], ReportFormat::Csv).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1], "\"a,b\",dart,98.97,0.12,3.46,28.10,3.62,1.50,5.356,");
    }
}
