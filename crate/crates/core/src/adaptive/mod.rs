//! Online refinement of per-exit threshold coefficients.
//!
//! Coefficients multiply the base thresholds element-wise. Two update rules
//! drive them from sliding-window statistics:
//!
//! - temporal: `c <- decay * c + (1 - decay) * f(A)` with `f(A) = 1 + (A_target - A)`
//!   on the global vector, `A` being the windowed accuracy
//! - class-aware: `c_class <- c_class + eta * (A_target - A_class)` per class
//!
//! Both clamp to `[0.5, 2.0]`. A UCB1 bandit can pick among the strategies
//! {temporal, class-aware, both, frozen} at every update period.

mod bandit;
mod window;

pub use bandit::{strategy_reward, ucb_select, BanditState};
pub use window::{SlidingWindow, WindowEntry, WindowFilter, WindowStats};

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const COEFF_MIN: f64 = 0.5;
pub const COEFF_MAX: f64 = 2.0;

fn clamp_coeff(c: f64) -> f64 {
    c.clamp(COEFF_MIN, COEFF_MAX)
}

/// Global and per-class per-exit coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSet {
    pub global: Vec<f64>,
    #[serde(default)]
    pub per_class: BTreeMap<usize, Vec<f64>>,
}

impl CoefficientSet {
    /// All-ones coefficients for a model with `num_exits` exits.
    pub fn ones(num_exits: usize) -> Self {
        Self {
            global: vec![1.0; num_exits.saturating_sub(1)],
            per_class: BTreeMap::new(),
        }
    }

    /// Coefficients for `class`, falling back to the global vector.
    pub fn for_class(&self, class: Option<usize>) -> &[f64] {
        class
            .and_then(|c| self.per_class.get(&c))
            .unwrap_or(&self.global)
    }

    /// Mutable per-class vector, initialized from the global one on first use.
    pub fn class_mut(&mut self, class: usize) -> &mut Vec<f64> {
        self.per_class
            .entry(class)
            .or_insert_with(|| self.global.clone())
    }

    pub fn validate(&self, num_exits: usize) -> Result<()> {
        let expected = num_exits.saturating_sub(1);
        for v in std::iter::once(&self.global).chain(self.per_class.values()) {
            if v.len() != expected {
                return Err(Error::DimensionMismatch {
                    expected,
                    actual: v.len(),
                });
            }
            if let Some(c) = v.iter().find(|c| !(COEFF_MIN..=COEFF_MAX).contains(*c)) {
                return Err(Error::InvalidArgument(format!(
                    "coefficient {c} outside [{COEFF_MIN}, {COEFF_MAX}]"
                )));
            }
        }
        Ok(())
    }
}

/// Target coefficient for a windowed accuracy: `1 + (target - accuracy)`, clamped.
pub fn performance_target(accuracy: f64, target: f64) -> f64 {
    clamp_coeff(1.0 + (target - accuracy))
}

/// Exponential-decay blend of the previous coefficient toward `perf`.
pub fn temporal_update(c_prev: f64, perf: f64, decay: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::InvalidArgument(format!("decay {decay} outside [0,1]")));
    }
    Ok(clamp_coeff(decay * c_prev + (1.0 - decay) * perf))
}

/// Shifts every coefficient by `eta * (target - class_accuracy)`, clamped.
pub fn class_update(coeffs: &[f64], class_accuracy: f64, target: f64, eta: f64) -> Vec<f64> {
    let delta = eta * (target - class_accuracy);
    coeffs.iter().map(|c| clamp_coeff(c + delta)).collect()
}

/// Adaptation strategies available to the bandit, in arm order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    TemporalOnly,
    ClassAwareOnly,
    Both,
    Frozen,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::TemporalOnly,
        Strategy::ClassAwareOnly,
        Strategy::Both,
        Strategy::Frozen,
    ];

    fn temporal(self) -> bool {
        matches!(self, Strategy::TemporalOnly | Strategy::Both)
    }

    fn class_aware(self) -> bool {
        matches!(self, Strategy::ClassAwareOnly | Strategy::Both)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::TemporalOnly => "temporal-only",
            Strategy::ClassAwareOnly => "class-aware-only",
            Strategy::Both => "both",
            Strategy::Frozen => "frozen",
        })
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.to_string() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy {s}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveConfig {
    pub decay: f64,
    pub eta: f64,
    pub target_accuracy: f64,
    pub window: usize,
    /// Coefficients refresh after every `cadence` observations.
    pub cadence: usize,
    pub pseudo_label_cutoff: f64,
    pub beta_opt: f64,
    /// Strategy used when the bandit is off, and before its first pick.
    pub strategy: Strategy,
    pub use_bandit: bool,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self {
            decay: 0.95,
            eta: 0.05,
            target_accuracy: 0.85,
            window: 1000,
            cadence: 100,
            pseudo_label_cutoff: 0.9,
            beta_opt: 0.3,
            strategy: Strategy::Both,
            use_bandit: false,
        }
    }
}

impl AdaptiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.decay) {
            return Err(Error::InvalidArgument("decay outside [0,1]".into()));
        }
        if !(self.eta > 0.0) {
            return Err(Error::InvalidArgument("eta must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.target_accuracy) {
            return Err(Error::InvalidArgument("target accuracy outside [0,1]".into()));
        }
        if self.window == 0 || self.cadence == 0 {
            return Err(Error::InvalidArgument(
                "window and cadence must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One coefficient change, as written to the adaptation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptEvent {
    pub iteration: u64,
    pub strategy: Strategy,
    /// `None` for the global vector.
    pub class: Option<usize>,
    pub old: Vec<f64>,
    pub new: Vec<f64>,
}

/// Single-writer owner of the coefficients, the window and the bandit.
#[derive(Debug, Clone)]
pub struct AdaptiveManager {
    cfg: AdaptiveConfig,
    coefficients: CoefficientSet,
    window: SlidingWindow,
    bandit: Option<BanditState>,
    current: Strategy,
    // strategy awaiting its reward from the period that just ended
    pending: Option<Strategy>,
    observed: u64,
    log: Vec<AdaptEvent>,
}

impl AdaptiveManager {
    pub fn new(cfg: AdaptiveConfig, initial: CoefficientSet) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            window: SlidingWindow::new(cfg.window),
            bandit: cfg.use_bandit.then(|| BanditState::new(Strategy::ALL.len())),
            current: cfg.strategy,
            pending: None,
            observed: 0,
            log: Vec::new(),
            coefficients: initial,
            cfg,
        })
    }

    pub fn config(&self) -> &AdaptiveConfig {
        &self.cfg
    }

    /// Read-only view of the current coefficients.
    pub fn coefficients(&self) -> &CoefficientSet {
        &self.coefficients
    }

    pub fn window(&self) -> &SlidingWindow {
        &self.window
    }

    pub fn bandit(&self) -> Option<&BanditState> {
        self.bandit.as_ref()
    }

    pub fn current_strategy(&self) -> Strategy {
        self.current
    }

    pub fn log(&self) -> &[AdaptEvent] {
        &self.log
    }

    pub fn into_parts(self) -> (CoefficientSet, Vec<AdaptEvent>) {
        (self.coefficients, self.log)
    }

    /// Records an outcome and refreshes coefficients at period boundaries.
    pub fn observe(&mut self, entry: WindowEntry) -> Result<()> {
        self.window.push(entry);
        self.observed += 1;
        if self.observed.is_multiple_of(self.cfg.cadence as u64) {
            self.refresh()?;
        }
        Ok(())
    }

    fn refresh(&mut self) -> Result<()> {
        if let Some(bandit) = self.bandit.as_mut() {
            if let Some(prev) = self.pending.take() {
                let recent = self.window.recent_stats(self.cfg.cadence, WindowFilter::all());
                if let Some(stats) = recent {
                    let reward = strategy_reward(
                        stats.accuracy.unwrap_or(0.0),
                        stats.mean_cost,
                        self.cfg.beta_opt,
                    );
                    let arm = Strategy::ALL.iter().position(|s| *s == prev).unwrap();
                    bandit.update(arm, reward)?;
                }
            }
            self.current = Strategy::ALL[ucb_select(bandit)?];
            self.pending = Some(self.current);
        }
        let strategy = self.current;
        if strategy.temporal() {
            self.apply_temporal(strategy)?;
        }
        if strategy.class_aware() {
            self.apply_class_aware(strategy);
        }
        Ok(())
    }

    fn apply_temporal(&mut self, strategy: Strategy) -> Result<()> {
        let Some(accuracy) = self.window.stats(WindowFilter::all()).and_then(|s| s.accuracy) else {
            return Ok(());
        };
        let perf = performance_target(accuracy, self.cfg.target_accuracy);
        let old = self.coefficients.global.clone();
        let new = old
            .iter()
            .map(|&c| temporal_update(c, perf, self.cfg.decay))
            .collect::<Result<Vec<_>>>()?;
        self.coefficients.global = new.clone();
        self.log.push(AdaptEvent {
            iteration: self.observed,
            strategy,
            class: None,
            old,
            new,
        });
        Ok(())
    }

    fn apply_class_aware(&mut self, strategy: Strategy) {
        for class in self.window.classes() {
            let Some(accuracy) = self
                .window
                .stats(WindowFilter::class(class))
                .and_then(|s| s.accuracy)
            else {
                continue;
            };
            let slot = self.coefficients.class_mut(class);
            let old = slot.clone();
            let new = class_update(&old, accuracy, self.cfg.target_accuracy, self.cfg.eta);
            *slot = new.clone();
            self.log.push(AdaptEvent {
                iteration: self.observed,
                strategy,
                class: Some(class),
                old,
                new,
            });
        }
    }
}
