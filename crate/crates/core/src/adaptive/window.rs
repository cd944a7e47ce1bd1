use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

/// One inference outcome as seen by the adaptation loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowEntry {
    /// 1-based exit the sample left at.
    pub exit: usize,
    /// True label, or pseudo-label, or the prediction when neither is usable.
    pub class: Option<usize>,
    /// `None` when correctness cannot be judged.
    pub correct: Option<bool>,
    pub confidence: f64,
    /// Normalized cumulative cost of the chosen exit.
    pub cost: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WindowFilter {
    pub exit: Option<usize>,
    pub class: Option<usize>,
}

impl WindowFilter {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn class(class: usize) -> Self {
        Self {
            class: Some(class),
            ..Self::default()
        }
    }

    pub fn exit(exit: usize) -> Self {
        Self {
            exit: Some(exit),
            ..Self::default()
        }
    }

    fn matches(&self, e: &WindowEntry) -> bool {
        self.exit.is_none_or(|x| x == e.exit) && self.class.is_none_or(|c| e.class == Some(c))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WindowStats {
    pub count: usize,
    /// Over entries whose correctness is known; `None` if there are none.
    pub accuracy: Option<f64>,
    pub mean_confidence: f64,
    pub mean_cost: f64,
}

/// Fixed-capacity FIFO of recent outcomes.
#[derive(Debug, Clone)]
pub struct SlidingWindow {
    capacity: usize,
    entries: VecDeque<WindowEntry>,
}

impl SlidingWindow {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "window capacity must be positive");
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends an entry, returning the evicted oldest one when full.
    pub fn push(&mut self, entry: WindowEntry) -> Option<WindowEntry> {
        let evicted = if self.entries.len() == self.capacity {
            self.entries.pop_front()
        } else {
            None
        };
        self.entries.push_back(entry);
        evicted
    }

    pub fn iter(&self) -> impl DoubleEndedIterator<Item = &WindowEntry> + ExactSizeIterator {
        self.entries.iter()
    }

    /// Statistics over retained entries matching `filter`; `None` if none match.
    pub fn stats(&self, filter: WindowFilter) -> Option<WindowStats> {
        summarize(self.entries.iter().filter(|e| filter.matches(e)))
    }

    /// Like [`stats`](Self::stats) but over the `n` most recent entries only.
    pub fn recent_stats(&self, n: usize, filter: WindowFilter) -> Option<WindowStats> {
        summarize(self.entries.iter().rev().take(n).filter(|e| filter.matches(e)))
    }

    /// Distinct classes present, ascending.
    pub fn classes(&self) -> Vec<usize> {
        let mut classes: Vec<usize> = self.entries.iter().filter_map(|e| e.class).collect();
        classes.sort_unstable();
        classes.dedup();
        classes
    }
}

fn summarize<'a>(entries: impl Iterator<Item = &'a WindowEntry>) -> Option<WindowStats> {
    let (mut count, mut judged, mut correct) = (0usize, 0usize, 0usize);
    let (mut conf, mut cost) = (0.0, 0.0);
    for e in entries {
        count += 1;
        conf += e.confidence;
        cost += e.cost;
        if let Some(ok) = e.correct {
            judged += 1;
            correct += usize::from(ok);
        }
    }
    (count > 0).then(|| WindowStats {
        count,
        accuracy: (judged > 0).then(|| correct as f64 / judged as f64),
        mean_confidence: conf / count as f64,
        mean_cost: cost / count as f64,
    })
}
