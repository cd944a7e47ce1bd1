//! Exit traces: per-sample confidences and predictions at every exit head,
//! plus the cost profile of the model that produced them.
//!
//! On disk a trace is UTF-8 JSON lines. Line 1 is the profile header, every
//! following line is one sample:
//!
//! ```text
//! {"type":"profile","model":"m","dataset":"d","num_exits":2,"num_classes":10,"cum_macs":[..],"cum_time_ms":[..],"cum_energy_mj":[..]}
//! {"type":"sample","id":"0","label":3,"conf":[0.4,0.9],"pred":[1,3],"difficulty":0.7}
//! ```
//!
//! Optional sample keys (`label`, `difficulty`, `image`) are omitted rather
//! than written as `null`. When a sample carries both `difficulty` and
//! `image`, the stored difficulty takes precedence.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cumulative per-exit costs of a multi-exit model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitProfile {
    #[serde(rename = "model")]
    pub model_name: String,
    #[serde(rename = "dataset")]
    pub dataset_name: String,
    pub num_exits: usize,
    pub num_classes: usize,
    pub cum_macs: Vec<f64>,
    pub cum_time_ms: Vec<f64>,
    pub cum_energy_mj: Vec<f64>,
}

impl ExitProfile {
    pub fn validate(&self) -> Result<()> {
        if self.num_exits == 0 {
            return Err(Error::InvalidTrace("num_exits must be at least 1".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidTrace("num_classes must be at least 1".into()));
        }
        for (name, seq) in [
            ("cum_macs", &self.cum_macs),
            ("cum_time_ms", &self.cum_time_ms),
            ("cum_energy_mj", &self.cum_energy_mj),
        ] {
            if seq.len() != self.num_exits {
                return Err(Error::InvalidTrace(format!(
                    "{name} has {} entries for {} exits",
                    seq.len(),
                    self.num_exits
                )));
            }
            if seq.iter().any(|c| !c.is_finite() || *c <= 0.0) {
                return Err(Error::InvalidTrace(format!("{name} must be positive")));
            }
            if seq.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::InvalidTrace(format!(
                    "{name} must be strictly increasing"
                )));
            }
        }
        Ok(())
    }

    /// Cumulative MACs at `exit` (0-based) divided by the final exit's MACs.
    pub fn normalized_cost(&self, exit: usize) -> f64 {
        self.cum_macs[exit] / self.cum_macs[self.num_exits - 1]
    }
}

/// One calibration or test sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    #[serde(rename = "id")]
    pub sample_id: String,
    #[serde(rename = "label", default, skip_serializing_if = "Option::is_none")]
    pub true_label: Option<usize>,
    #[serde(rename = "conf")]
    pub confidences: Vec<f64>,
    #[serde(rename = "pred")]
    pub predictions: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<f64>,
    #[serde(rename = "image", default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

impl SampleRecord {
    pub fn validate(&self, profile: &ExitProfile) -> Result<(), String> {
        let n = profile.num_exits;
        if self.confidences.len() != n {
            return Err(format!(
                "sample {}: {} confidences for {n} exits",
                self.sample_id,
                self.confidences.len()
            ));
        }
        if self.predictions.len() != n {
            return Err(format!(
                "sample {}: {} predictions for {n} exits",
                self.sample_id,
                self.predictions.len()
            ));
        }
        if let Some(c) = self.confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(format!(
                "sample {}: confidence {c} outside [0,1]",
                self.sample_id
            ));
        }
        let k = profile.num_classes;
        if let Some(p) = self.predictions.iter().find(|p| **p >= k) {
            return Err(format!(
                "sample {}: prediction {p} outside [0,{k})",
                self.sample_id
            ));
        }
        if let Some(l) = self.true_label.filter(|l| *l >= k) {
            return Err(format!("sample {}: label {l} outside [0,{k})", self.sample_id));
        }
        if let Some(d) = self.difficulty.filter(|d| !(0.0..=1.0).contains(d)) {
            return Err(format!(
                "sample {}: difficulty {d} outside [0,1]",
                self.sample_id
            ));
        }
        Ok(())
    }

    /// Whether the prediction at `exit` (0-based) matches the label.
    pub fn correct_at(&self, exit: usize) -> Option<bool> {
        self.true_label.map(|l| self.predictions[exit] == l)
    }
}

/// A validated profile and its samples, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    profile: ExitProfile,
    samples: Vec<SampleRecord>,
}

impl TraceSet {
    pub fn new(profile: ExitProfile, samples: Vec<SampleRecord>) -> Result<Self> {
        profile.validate()?;
        let mut seen = HashSet::with_capacity(samples.len());
        for s in &samples {
            s.validate(&profile).map_err(Error::InvalidTrace)?;
            if !seen.insert(s.sample_id.as_str()) {
                return Err(Error::InvalidTrace(format!(
                    "duplicate sample id {}",
                    s.sample_id
                )));
            }
        }
        Ok(Self { profile, samples })
    }

    pub fn profile(&self) -> &ExitProfile {
        &self.profile
    }

    pub fn samples(&self) -> &[SampleRecord] {
        &self.samples
    }

    pub fn num_exits(&self) -> usize {
        self.profile.num_exits
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Same profile, samples reordered by `order` (a permutation of indices).
    pub fn reordered(&self, order: &[usize]) -> Self {
        Self {
            profile: self.profile.clone(),
            samples: order.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Errors unless every sample carries a label.
    pub fn require_labels(&self) -> Result<()> {
        match self.samples.iter().find(|s| s.true_label.is_none()) {
            Some(s) => Err(Error::MissingLabel(s.sample_id.clone())),
            None => Ok(()),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Line {
    Profile(ExitProfile),
    Sample(SampleRecord),
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum LineRef<'a> {
    Profile(&'a ExitProfile),
    Sample(&'a SampleRecord),
}

/// Parses and validates a JSON-lines trace. Errors carry 1-based line numbers.
pub fn read_trace(source: impl BufRead) -> Result<TraceSet> {
    let mut profile: Option<ExitProfile> = None;
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in source.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Trace {
            line: lineno,
            message,
        };
        let parsed: Line = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        match (parsed, &profile) {
            (Line::Profile(p), None) => {
                p.validate().map_err(|e| err(e.to_string()))?;
                profile = Some(p);
            }
            (Line::Profile(_), Some(_)) => return Err(err("second profile header".into())),
            (Line::Sample(_), None) => {
                return Err(err("sample before profile header".into()));
            }
            (Line::Sample(s), Some(p)) => {
                s.validate(p).map_err(err)?;
                if !seen.insert(s.sample_id.clone()) {
                    return Err(err(format!("duplicate sample id {}", s.sample_id)));
                }
                samples.push(s);
            }
        }
    }
    let profile = profile.ok_or(Error::Trace {
        line: 1,
        message: "missing profile header".into(),
    })?;
    Ok(TraceSet { profile, samples })
}

/// Writes the canonical JSON-lines form of a trace.
pub fn write_trace(trace: &TraceSet, mut sink: impl Write) -> Result<()> {
    serde_json::to_writer(&mut sink, &LineRef::Profile(&trace.profile))?;
    sink.write_all(b"\n")?;
    for s in &trace.samples {
        serde_json::to_writer(&mut sink, &LineRef::Sample(s))?;
        sink.write_all(b"\n")?;
    }
    sink.flush()?;
    Ok(())
}

/// Parameters of the synthetic trace generator.
///
/// Each sample draws a class uniformly, then a difficulty
/// `alpha = clamp(U(0,1) + class_bias[class], 0, 1)`. The confidence at exit
/// `i` (1-based) is `clamp(sigmoid(base + gain * i/N - difficulty_weight * alpha + noise), 0, 1)`
/// with Gaussian noise, and the prediction there is correct with probability
/// equal to that confidence, so confidences are calibrated by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_exits: usize,
    pub num_samples: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub class_bias: BTreeMap<usize, f64>,
    pub base: f64,
    pub gain: f64,
    pub difficulty_weight: f64,
    pub noise_std: f64,
    pub total_macs: f64,
    pub total_time_ms: f64,
    pub total_energy_mj: f64,
    pub model_name: String,
    pub dataset_name: String,
}

impl SynthConfig {
    pub fn new(num_exits: usize, num_samples: usize, num_classes: usize, seed: u64) -> Self {
        Self {
            num_exits,
            num_samples,
            num_classes,
            seed,
            class_bias: BTreeMap::new(),
            base: 0.0,
            gain: 4.0,
            difficulty_weight: 2.0,
            noise_std: 0.3,
            total_macs: 1.0e9,
            total_time_ms: 1.0,
            total_energy_mj: 50.0,
            model_name: "synthetic".into(),
            dataset_name: "synthetic".into(),
        }
    }

    pub fn with_bias(mut self, class_bias: BTreeMap<usize, f64>) -> Self {
        self.class_bias = class_bias;
        self
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Generates a deterministic synthetic trace.
pub fn synth_trace(cfg: &SynthConfig) -> Result<TraceSet> {
    let (n, m, k) = (cfg.num_exits, cfg.num_samples, cfg.num_classes);
    if n == 0 {
        return Err(Error::InvalidArgument("num_exits must be at least 1".into()));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("num_samples must be at least 1".into()));
    }
    if k < 2 {
        return Err(Error::InvalidArgument("num_classes must be at least 2".into()));
    }
    if let Some(c) = cfg.class_bias.keys().find(|c| **c >= k) {
        return Err(Error::InvalidArgument(format!(
            "bias given for class {c} but only {k} classes"
        )));
    }
    let noise = Normal::new(0.0, cfg.noise_std)
        .map_err(|e| Error::InvalidArgument(format!("noise_std: {e}")))?;
    let scaled = |total: f64| (1..=n).map(|i| total * i as f64 / n as f64).collect();
    let profile = ExitProfile {
        model_name: cfg.model_name.clone(),
        dataset_name: cfg.dataset_name.clone(),
        num_exits: n,
        num_classes: k,
        cum_macs: scaled(cfg.total_macs),
        cum_time_ms: scaled(cfg.total_time_ms),
        cum_energy_mj: scaled(cfg.total_energy_mj),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples = Vec::with_capacity(m);
    for idx in 0..m {
        let label = rng.random_range(0..k);
        let offset = cfg.class_bias.get(&label).copied().unwrap_or(0.0);
        let alpha = (rng.random::<f64>() + offset).clamp(0.0, 1.0);
        let mut confidences = Vec::with_capacity(n);
        let mut predictions = Vec::with_capacity(n);
        for i in 1..=n {
            let logit = cfg.base + cfg.gain * i as f64 / n as f64 - cfg.difficulty_weight * alpha
                + noise.sample(&mut rng);
            let conf = sigmoid(logit).clamp(0.0, 1.0);
            let pred = if rng.random::<f64>() < conf {
                label
            } else {
                // uniform over the other classes
                let other = rng.random_range(0..k - 1);
                if other >= label {
                    other + 1
                } else {
                    other
                }
            };
            confidences.push(conf);
            predictions.push(pred);
        }
        samples.push(SampleRecord {
            sample_id: idx.to_string(),
            true_label: Some(label),
            confidences,
            predictions,
            difficulty: Some(alpha),
            image_ref: None,
        });
    }
    TraceSet::new(profile, samples)
}
