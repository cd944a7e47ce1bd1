//! Exit decisions as a finite-horizon MDP.
//!
//! States are `(exit, alpha_bin, conf_bin)` with uniform bins over `[0,1]`.
//! From every state the policy may `exit` (terminal, reward = bin accuracy at
//! that exit minus `beta_opt` times the normalized cumulative cost) or
//! `continue` (reward 0) to `(exit + 1, alpha_bin, c')` with the empirical
//! distribution of the next exit's confidence bin among the bin's members.
//! The final exit has only the exit action.
//!
//! Because the exit index strictly increases, the state graph is a DAG and a
//! single backward sweep gives the optimal Q-table.

use serde::Serialize;

use super::{ObjectiveConfig, ThresholdVector};
use crate::error::{Error, Result};
use crate::trace::TraceSet;

const ROW_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MdpConfig {
    pub alpha_bins: usize,
    pub conf_bins: usize,
}

impl Default for MdpConfig {
    fn default() -> Self {
        Self {
            alpha_bins: 10,
            conf_bins: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub discount: f64,
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            discount: 1.0,
            tolerance: 1e-9,
            max_iter: 1000,
        }
    }
}

impl SolverConfig {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.discount) {
            return Err(Error::InvalidArgument(format!(
                "discount {} outside [0,1]",
                self.discount
            )));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidArgument("tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// Tabular exit MDP. State `(exit, a, c)` has index `(exit * alpha_bins + a) * conf_bins + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct MdpModel {
    num_exits: usize,
    alpha_bins: usize,
    conf_bins: usize,
    exit_reward: Vec<f64>,
    /// Distribution over the next exit's confidence bins; empty at the final exit.
    continue_next: Vec<Vec<f64>>,
    supported: Vec<bool>,
    alpha_freq: Vec<f64>,
}

impl MdpModel {
    /// Assembles a model from raw tables. Shapes are checked here; transition
    /// rows are checked by the solvers.
    pub fn new(
        num_exits: usize,
        alpha_bins: usize,
        conf_bins: usize,
        exit_reward: Vec<f64>,
        continue_next: Vec<Vec<f64>>,
        supported: Vec<bool>,
        alpha_freq: Vec<f64>,
    ) -> Result<Self> {
        if num_exits == 0 || alpha_bins == 0 || conf_bins == 0 {
            return Err(Error::InvalidArgument(
                "exits and bin counts must be positive".into(),
            ));
        }
        let states = num_exits * alpha_bins * conf_bins;
        for len in [exit_reward.len(), continue_next.len(), supported.len()] {
            if len != states {
                return Err(Error::DimensionMismatch {
                    expected: states,
                    actual: len,
                });
            }
        }
        if alpha_freq.len() != alpha_bins {
            return Err(Error::DimensionMismatch {
                expected: alpha_bins,
                actual: alpha_freq.len(),
            });
        }
        let model = Self {
            num_exits,
            alpha_bins,
            conf_bins,
            exit_reward,
            continue_next,
            supported,
            alpha_freq,
        };
        for s in 0..states {
            let expected = if model.is_final(s) { 0 } else { conf_bins };
            if model.continue_next[s].len() != expected {
                return Err(Error::DimensionMismatch {
                    expected,
                    actual: model.continue_next[s].len(),
                });
            }
        }
        Ok(model)
    }

    pub fn num_exits(&self) -> usize {
        self.num_exits
    }

    pub fn alpha_bins(&self) -> usize {
        self.alpha_bins
    }

    pub fn conf_bins(&self) -> usize {
        self.conf_bins
    }

    pub fn num_states(&self) -> usize {
        self.exit_reward.len()
    }

    pub fn state(&self, exit: usize, alpha_bin: usize, conf_bin: usize) -> usize {
        (exit * self.alpha_bins + alpha_bin) * self.conf_bins + conf_bin
    }

    /// `(exit, alpha_bin, conf_bin)` of a state index.
    pub fn decode(&self, s: usize) -> (usize, usize, usize) {
        let c = s % self.conf_bins;
        let rest = s / self.conf_bins;
        (rest / self.alpha_bins, rest % self.alpha_bins, c)
    }

    pub fn is_final(&self, s: usize) -> bool {
        self.decode(s).0 + 1 == self.num_exits
    }

    pub fn exit_reward(&self, s: usize) -> f64 {
        self.exit_reward[s]
    }

    /// Whether any calibration sample landed in this state.
    pub fn is_supported(&self, s: usize) -> bool {
        self.supported[s]
    }

    pub fn alpha_freq(&self) -> &[f64] {
        &self.alpha_freq
    }

    /// Successor states and probabilities of `continue`; empty at the final exit.
    pub fn continue_successors(&self, s: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (exit, a, _) = self.decode(s);
        self.continue_next[s]
            .iter()
            .enumerate()
            .map(move |(c, &p)| (self.state(exit + 1, a, c), p))
    }

    fn check_rows(&self) -> Result<()> {
        for (s, row) in self.continue_next.iter().enumerate() {
            if row.is_empty() {
                continue;
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOLERANCE || row.iter().any(|p| *p < 0.0) {
                return Err(Error::NonStochastic { state: s, sum });
            }
        }
        Ok(())
    }
}

fn bin(x: f64, bins: usize) -> usize {
    ((x * bins as f64).floor() as usize).min(bins - 1)
}

/// Estimates the exit MDP from a labelled calibration trace. Samples need a
/// stored difficulty unless `alpha_bins == 1`.
pub fn build_mdp(traces: &TraceSet, mdp: &MdpConfig, cfg: &ObjectiveConfig) -> Result<MdpModel> {
    let (ab, cb) = (mdp.alpha_bins, mdp.conf_bins);
    if ab == 0 || cb == 0 {
        return Err(Error::InvalidArgument("bin counts must be positive".into()));
    }
    if traces.is_empty() {
        return Err(Error::Empty("trace set"));
    }
    traces.require_labels()?;
    let n = traces.num_exits();
    let states = n * ab * cb;
    let state = |exit: usize, a: usize, c: usize| (exit * ab + a) * cb + c;

    let mut members = vec![0usize; states];
    let mut correct = vec![0usize; states];
    let mut next_counts = vec![vec![0usize; cb]; states];
    let mut alpha_counts = vec![0usize; ab];

    for s in traces.samples() {
        let a = if ab == 1 {
            0
        } else {
            let alpha = s
                .difficulty
                .ok_or_else(|| Error::MissingDifficulty(s.sample_id.clone()))?;
            bin(alpha, ab)
        };
        alpha_counts[a] += 1;
        for exit in 0..n {
            let st = state(exit, a, bin(s.confidences[exit], cb));
            members[st] += 1;
            if s.correct_at(exit) == Some(true) {
                correct[st] += 1;
            }
            if exit + 1 < n {
                next_counts[st][bin(s.confidences[exit + 1], cb)] += 1;
            }
        }
    }

    let profile = traces.profile();
    let mut exit_reward = vec![0.0; states];
    let mut continue_next = vec![Vec::new(); states];
    let mut supported = vec![false; states];
    for st in 0..states {
        let exit = st / (ab * cb);
        let m = members[st];
        supported[st] = m > 0;
        if m > 0 {
            exit_reward[st] =
                correct[st] as f64 / m as f64 - cfg.beta_opt * profile.normalized_cost(exit);
        }
        if exit + 1 < n {
            continue_next[st] = if m > 0 {
                next_counts[st].iter().map(|&k| k as f64 / m as f64).collect()
            } else {
                vec![1.0 / cb as f64; cb]
            };
        }
    }
    let total = traces.len() as f64;
    let alpha_freq = alpha_counts.iter().map(|&k| k as f64 / total).collect();
    MdpModel::new(n, ab, cb, exit_reward, continue_next, supported, alpha_freq)
}

/// Optimal action values. `q_continue` is `None` at the final exit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QTable {
    pub q_exit: Vec<f64>,
    pub q_continue: Vec<Option<f64>>,
    pub values: Vec<f64>,
}

impl QTable {
    /// Exit is preferred on ties.
    pub fn prefers_exit(&self, s: usize) -> bool {
        self.q_continue[s].is_none_or(|qc| self.q_exit[s] >= qc)
    }

    fn from_values(mdp: &MdpModel, values_next: &[f64], discount: f64) -> Self {
        let states = mdp.num_states();
        let mut q_exit = Vec::with_capacity(states);
        let mut q_continue = Vec::with_capacity(states);
        let mut values = Vec::with_capacity(states);
        for s in 0..states {
            let qe = mdp.exit_reward(s);
            let qc = (!mdp.is_final(s)).then(|| {
                discount
                    * mdp
                        .continue_successors(s)
                        .map(|(next, p)| p * values_next[next])
                        .sum::<f64>()
            });
            values.push(qc.map_or(qe, |qc| qe.max(qc)));
            q_exit.push(qe);
            q_continue.push(qc);
        }
        Self {
            q_exit,
            q_continue,
            values,
        }
    }
}

/// Solves the MDP exactly by one backward sweep over exit indices.
pub fn value_iterate(mdp: &MdpModel, cfg: &SolverConfig) -> Result<QTable> {
    cfg.validate()?;
    mdp.check_rows()?;
    let states = mdp.num_states();
    let layer = mdp.alpha_bins * mdp.conf_bins;
    let mut q_exit = vec![0.0; states];
    let mut q_continue = vec![None; states];
    let mut values = vec![0.0; states];
    for exit in (0..mdp.num_exits).rev() {
        for s in exit * layer..(exit + 1) * layer {
            let qe = mdp.exit_reward(s);
            let qc = (exit + 1 < mdp.num_exits).then(|| {
                cfg.discount
                    * mdp
                        .continue_successors(s)
                        .map(|(next, p)| p * values[next])
                        .sum::<f64>()
            });
            q_exit[s] = qe;
            q_continue[s] = qc;
            values[s] = qc.map_or(qe, |qc| qe.max(qc));
        }
    }
    Ok(QTable {
        q_exit,
        q_continue,
        values,
    })
}

/// Generic synchronous value iteration from `V = 0`, stopping once the
/// largest value change falls to `tolerance` or below.
pub fn fixed_point_iterate(mdp: &MdpModel, cfg: &SolverConfig) -> Result<QTable> {
    cfg.validate()?;
    mdp.check_rows()?;
    let mut values = vec![0.0; mdp.num_states()];
    for _ in 0..cfg.max_iter {
        let table = QTable::from_values(mdp, &values, cfg.discount);
        let delta = table
            .values
            .iter()
            .zip(&values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        values = table.values;
        if delta <= cfg.tolerance {
            return Ok(QTable::from_values(mdp, &values, cfg.discount));
        }
    }
    Err(Error::NotConverged(cfg.max_iter))
}

/// Threshold vector read off an MDP policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub thresholds: ThresholdVector,
    /// `(exit, alpha_bin)` pairs (0-based) whose exit preference is not
    /// monotone in confidence.
    pub non_monotone: Vec<(usize, usize)>,
    /// Per `(exit, alpha_bin)` lower bin edge, 1.0 where exit is never preferred.
    pub bin_thresholds: Vec<Vec<f64>>,
}

/// Collapses the per-bin exit policy into one threshold per exit: the lower
/// edge of the lowest confidence bin from which exit is preferred in every
/// supported bin above, averaged over
/// difficulty bins by their calibration frequency. Unsupported states are
/// treated as `continue`.
pub fn extract_thresholds(q: &QTable, mdp: &MdpModel) -> Result<Extraction> {
    let states = mdp.num_states();
    for len in [q.q_exit.len(), q.q_continue.len(), q.values.len()] {
        if len != states {
            return Err(Error::DimensionMismatch {
                expected: states,
                actual: len,
            });
        }
    }
    let (ab, cb) = (mdp.alpha_bins, mdp.conf_bins);
    let mut thresholds = Vec::with_capacity(mdp.num_exits - 1);
    let mut bin_thresholds = Vec::with_capacity(mdp.num_exits - 1);
    let mut non_monotone = Vec::new();
    for exit in 0..mdp.num_exits - 1 {
        let mut per_alpha = Vec::with_capacity(ab);
        for a in 0..ab {
            let exits_here = |c: usize| {
                let s = mdp.state(exit, a, c);
                mdp.is_supported(s) && q.prefers_exit(s)
            };
            let supported = |c: usize| mdp.is_supported(mdp.state(exit, a, c));
            // Start of the run of exit-preferring bins that reaches the top
            // supported bin.
            let top_run = (0..cb)
                .rev()
                .filter(|&c| supported(c))
                .take_while(|&c| exits_here(c))
                .last();
            let lowest = (0..cb).find(|&c| exits_here(c));
            let edge = match (top_run, lowest) {
                (Some(start), Some(lowest)) => {
                    if lowest < start {
                        non_monotone.push((exit, a));
                    }
                    start as f64 / cb as f64
                }
                (None, Some(lowest)) => {
                    non_monotone.push((exit, a));
                    lowest as f64 / cb as f64
                }
                _ => 1.0,
            };
            per_alpha.push(edge);
        }
        let tau: f64 = per_alpha
            .iter()
            .zip(&mdp.alpha_freq)
            .map(|(t, f)| t * f)
            .sum();
        thresholds.push(tau.clamp(0.0, 1.0));
        bin_thresholds.push(per_alpha);
    }
    Ok(Extraction {
        thresholds: ThresholdVector::new(thresholds)?,
        non_monotone,
        bin_thresholds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{synth_trace, SynthConfig};

    fn solver() -> SolverConfig {
        SolverConfig::default()
    }

    #[test]
    fn single_conf_bin_gives_deterministic_rows() {
        let t = synth_trace(&SynthConfig::new(3, 300, 3, 1)).unwrap();
        let cfg = MdpConfig {
            alpha_bins: 4,
            conf_bins: 1,
        };
        let m = build_mdp(&t, &cfg, &ObjectiveConfig::default()).unwrap();
        for s in 0..m.num_states() {
            if !m.is_final(s) {
                assert_eq!(m.continue_next[s], vec![1.0]);
            }
        }
    }

    #[test]
    fn exit_reward_formula() {
        // 2 exits, equal MACs steps: C_1 = 0.5; every sample correct at exit 1
        let mut t = synth_trace(&SynthConfig::new(2, 50, 3, 2)).unwrap();
        let samples = t
            .samples()
            .iter()
            .cloned()
            .map(|mut s| {
                s.predictions[0] = s.true_label.unwrap();
                s
            })
            .collect();
        t = TraceSet::new(t.profile().clone(), samples).unwrap();
        let m = build_mdp(
            &t,
            &MdpConfig {
                alpha_bins: 1,
                conf_bins: 5,
            },
            &ObjectiveConfig::new(0.3).unwrap(),
        )
        .unwrap();
        for c in 0..5 {
            let s = m.state(0, 0, c);
            if m.is_supported(s) {
                assert!((m.exit_reward(s) - 0.85).abs() < 1e-12);
            } else {
                assert_eq!(m.exit_reward(s), 0.0);
            }
        }
    }

    #[test]
    fn rows_match_brute_force_recount() {
        let t = synth_trace(&SynthConfig::new(3, 800, 4, 3)).unwrap();
        let cfg = MdpConfig::default();
        let m = build_mdp(&t, &cfg, &ObjectiveConfig::default()).unwrap();
        for s in 0..m.num_states() {
            let (exit, a, c) = m.decode(s);
            if exit + 1 == m.num_exits() {
                continue;
            }
            let members: Vec<_> = t
                .samples()
                .iter()
                .filter(|x| {
                    bin(x.difficulty.unwrap(), cfg.alpha_bins) == a
                        && bin(x.confidences[exit], cfg.conf_bins) == c
                })
                .collect();
            let row = &m.continue_next[s];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            if members.is_empty() {
                assert!(!m.is_supported(s));
                continue;
            }
            for (c2, p) in row.iter().enumerate() {
                let k = members
                    .iter()
                    .filter(|x| bin(x.confidences[exit + 1], cfg.conf_bins) == c2)
                    .count();
                assert!((p - k as f64 / members.len() as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn requires_difficulty_when_binning_alpha() {
        let t = synth_trace(&SynthConfig::new(2, 10, 3, 3)).unwrap();
        let samples = t
            .samples()
            .iter()
            .cloned()
            .map(|mut s| {
                s.difficulty = None;
                s
            })
            .collect();
        let t = TraceSet::new(t.profile().clone(), samples).unwrap();
        let obj = ObjectiveConfig::default();
        assert!(matches!(
            build_mdp(&t, &MdpConfig::default(), &obj),
            Err(Error::MissingDifficulty(_))
        ));
        let one = MdpConfig {
            alpha_bins: 1,
            conf_bins: 4,
        };
        assert!(build_mdp(&t, &one, &obj).is_ok());
    }

    #[test]
    fn zero_discount_collapses_to_rewards() {
        let t = synth_trace(&SynthConfig::new(3, 300, 3, 5)).unwrap();
        let m = build_mdp(&t, &MdpConfig::default(), &ObjectiveConfig::default()).unwrap();
        let q = value_iterate(
            &m,
            &SolverConfig {
                discount: 0.0,
                ..solver()
            },
        )
        .unwrap();
        for s in 0..m.num_states() {
            assert_eq!(q.q_exit[s], m.exit_reward(s));
            if !m.is_final(s) {
                assert_eq!(q.q_continue[s], Some(0.0));
            }
        }
    }

    #[test]
    fn single_exit_has_only_exit_actions() {
        let t = synth_trace(&SynthConfig::new(1, 100, 3, 5)).unwrap();
        let m = build_mdp(&t, &MdpConfig::default(), &ObjectiveConfig::default()).unwrap();
        let q = value_iterate(&m, &solver()).unwrap();
        assert!(q.q_continue.iter().all(Option::is_none));
        assert_eq!(q.values, q.q_exit);
        let ex = extract_thresholds(&q, &m).unwrap();
        assert!(ex.thresholds.is_empty());
    }

    #[test]
    fn backward_induction_matches_fixed_point() {
        let t = synth_trace(&SynthConfig::new(4, 1000, 3, 8)).unwrap();
        let m = build_mdp(&t, &MdpConfig::default(), &ObjectiveConfig::default()).unwrap();
        let a = value_iterate(&m, &solver()).unwrap();
        let b = fixed_point_iterate(&m, &solver()).unwrap();
        for s in 0..m.num_states() {
            assert!((a.values[s] - b.values[s]).abs() < 1e-9);
            let best = a.q_continue[s].map_or(a.q_exit[s], |qc| qc.max(a.q_exit[s]));
            assert_eq!(a.values[s], best);
        }
    }

    #[test]
    fn non_stochastic_rows_are_rejected() {
        let m = MdpModel::new(
            2,
            1,
            2,
            vec![0.1; 4],
            vec![vec![0.5, 0.4], vec![0.5, 0.5], vec![], vec![]],
            vec![true; 4],
            vec![1.0],
        )
        .unwrap();
        assert!(matches!(
            value_iterate(&m, &solver()),
            Err(Error::NonStochastic { state: 0, .. })
        ));
        assert!(fixed_point_iterate(&m, &solver()).is_err());
    }

    fn hand_built(prefer_exit: impl Fn(usize) -> bool) -> (MdpModel, QTable) {
        let cb = 10;
        let m = MdpModel::new(
            2,
            1,
            cb,
            vec![0.0; 2 * cb],
            (0..2 * cb)
                .map(|s| if s < cb { vec![0.1; cb] } else { vec![] })
                .collect(),
            vec![true; 2 * cb],
            vec![1.0],
        )
        .unwrap();
        let q = QTable {
            q_exit: (0..2 * cb)
                .map(|s| if s < cb && prefer_exit(s) { 1.0 } else { 0.0 })
                .collect(),
            q_continue: (0..2 * cb).map(|s| (s < cb).then_some(0.5)).collect(),
            values: vec![0.0; 2 * cb],
        };
        (m, q)
    }

    #[test]
    fn extraction_reads_lowest_exit_bin() {
        let (m, q) = hand_built(|c| c >= 5);
        let ex = extract_thresholds(&q, &m).unwrap();
        assert_eq!(ex.thresholds.values(), &[0.5]);
        assert!(ex.non_monotone.is_empty());

        let (m, q) = hand_built(|_| true);
        assert_eq!(extract_thresholds(&q, &m).unwrap().thresholds.values(), &[0.0]);

        let (m, q) = hand_built(|_| false);
        assert_eq!(extract_thresholds(&q, &m).unwrap().thresholds.values(), &[1.0]);
    }

    #[test]
    fn extraction_flags_non_monotone_preferences() {
        let (m, q) = hand_built(|c| c == 3 || c >= 7);
        let ex = extract_thresholds(&q, &m).unwrap();
        assert_eq!(ex.thresholds.values(), &[0.7]);
        assert_eq!(ex.non_monotone, vec![(0, 0)]);

        // top bin prefers continue: no monotone run, fall back to the lowest
        let (m, q) = hand_built(|c| c == 4 || c == 5);
        let ex = extract_thresholds(&q, &m).unwrap();
        assert_eq!(ex.thresholds.values(), &[0.4]);
        assert_eq!(ex.non_monotone, vec![(0, 0)]);
    }

    #[test]
    fn extraction_weights_alpha_bins_by_frequency() {
        let cb = 4;
        let states = 2 * 2 * cb;
        let m = MdpModel::new(
            2,
            2,
            cb,
            vec![0.0; states],
            (0..states)
                .map(|s| if s < 2 * cb { vec![0.25; cb] } else { vec![] })
                .collect(),
            vec![true; states],
            vec![0.75, 0.25],
        )
        .unwrap();
        // alpha bin 0 exits from bin 1 up (edge 0.25), bin 1 from bin 3 (edge 0.75)
        let prefer = |s: usize| {
            let (e, a, c) = m.decode(s);
            e == 0 && ((a == 0 && c >= 1) || (a == 1 && c >= 3))
        };
        let q = QTable {
            q_exit: (0..states).map(|s| if prefer(s) { 1.0 } else { 0.0 }).collect(),
            q_continue: (0..states).map(|s| (!m.is_final(s)).then_some(0.5)).collect(),
            values: vec![0.0; states],
        };
        let ex = extract_thresholds(&q, &m).unwrap();
        assert!((ex.thresholds.values()[0] - (0.75 * 0.25 + 0.25 * 0.75)).abs() < 1e-12);
    }

    #[test]
    fn unsupported_states_fall_back_to_continue() {
        let (mut m, q) = hand_built(|_| true);
        for c in 0..4 {
            m.supported[c] = false;
        }
        let ex = extract_thresholds(&q, &m).unwrap();
        assert_eq!(ex.thresholds.values(), &[0.4]);
    }
}
