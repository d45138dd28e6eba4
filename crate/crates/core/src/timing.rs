use std::time::Duration;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Attention,
    Ffn,
    CacheUpdate,
    Decision,
    Other,
}

/// Wall-clock split of one step (or one forward pass), in microseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub attention: f64,
    pub ffn: f64,
    pub cache_update: f64,
    pub decision: f64,
    pub other: f64,
}

impl PhaseTimes {
    pub fn add(&mut self, phase: Phase, elapsed: Duration) {
        let us = elapsed.as_secs_f64() * 1e6;
        match phase {
            Phase::Attention => self.attention += us,
            Phase::Ffn => self.ffn += us,
            Phase::CacheUpdate => self.cache_update += us,
            Phase::Decision => self.decision += us,
            Phase::Other => self.other += us,
        }
    }

    pub fn merge(&mut self, other: &PhaseTimes) {
        self.attention += other.attention;
        self.ffn += other.ffn;
        self.cache_update += other.cache_update;
        self.decision += other.decision;
        self.other += other.other;
    }

    pub fn total(&self) -> f64 {
        self.attention + self.ffn + self.cache_update + self.decision + self.other
    }
}
