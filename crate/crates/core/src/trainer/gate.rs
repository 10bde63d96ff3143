use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tracks the most recent discriminator decisions (one boolean per judged
/// sample: `true` when the sample was classified correctly) and decides
/// whether the adversarial update of the adapted network may run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateMonitor {
    window: usize,
    threshold: f64,
    history: VecDeque<bool>,
}

impl GateMonitor {
    pub fn new(window: usize, threshold: f64) -> Result<Self> {
        if window == 0 {
            return Err(Error::InvalidArgument("gate window must be >= 1".into()));
        }
        Ok(Self { window, threshold, history: VecDeque::with_capacity(window) })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    pub fn record(&mut self, correct: impl IntoIterator<Item = bool>) {
        for c in correct {
            if self.history.len() == self.window {
                self.history.pop_front();
            }
            self.history.push_back(c);
        }
    }

    /// Records one discriminator step: real samples are correct when called
    /// real, fake samples when not called real.
    pub fn record_step(&mut self, real_called_real: &[bool], fake_called_real: &[bool]) {
        self.record(real_called_real.iter().copied().chain(fake_called_real.iter().map(|&r| !r)));
    }

    /// Fraction of correct decisions among the filled entries.
    pub fn accuracy(&self) -> Option<f64> {
        if self.history.is_empty() {
            return None;
        }
        Some(self.history.iter().filter(|&&c| c).count() as f64 / self.history.len() as f64)
    }

    /// True when accuracy is strictly above the threshold.
    pub fn permits(&self) -> bool {
        self.accuracy().is_some_and(|a| a > self.threshold)
    }

    pub fn clear(&mut self) {
        self.history.clear();
    }
}
