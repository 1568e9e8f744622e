use std::collections::VecDeque;

use super::config::RateLimitEntry;
use crate::clock::NANOS_PER_SEC;
use crate::model::{pattern_matches, HttpOp};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateEvent {
    Stop(usize),
    Resume(usize),
}

/// Sliding one-second window per entry.
///
/// STOP fires when an entry's window holds `rate` allowed flows, so the
/// next one would exceed the rate. RESUME fires once a full window has
/// passed since the STOP with the count below the rate.
#[derive(Debug)]
pub struct RateLimiter {
    entries: Vec<RateLimitEntry>,
    windows: Vec<VecDeque<u64>>,
    stopped_at: Vec<Option<u64>>,
}

impl RateLimiter {
    pub fn new(entries: Vec<RateLimitEntry>) -> Self {
        let n = entries.len();
        RateLimiter { entries, windows: vec![VecDeque::new(); n], stopped_at: vec![None; n] }
    }

    pub fn entry(&self, i: usize) -> &RateLimitEntry {
        &self.entries[i]
    }

    pub fn is_stopped(&self, i: usize) -> bool {
        self.stopped_at[i].is_some()
    }

    fn evict(window: &mut VecDeque<u64>, now_ns: u64) {
        let Some(floor) = now_ns.checked_sub(NANOS_PER_SEC) else {
            return;
        };
        while window.front().is_some_and(|&t| t <= floor) {
            window.pop_front();
        }
    }

    /// Counts one allowed flow.
    pub fn observe(&mut self, function: &str, url: &str, op: HttpOp, now_ns: u64) -> Vec<RateEvent> {
        let mut out = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            if e.function != function || e.op != op || !pattern_matches(&e.pattern, url) {
                continue;
            }
            let w = &mut self.windows[i];
            Self::evict(w, now_ns);
            w.push_back(now_ns);
            if self.stopped_at[i].is_none() && w.len() >= e.rate as usize {
                self.stopped_at[i] = Some(now_ns);
                out.push(RateEvent::Stop(i));
            }
        }
        out
    }

    pub fn tick(&mut self, now_ns: u64) -> Vec<RateEvent> {
        let mut out = Vec::new();
        for i in 0..self.entries.len() {
            let Some(stop) = self.stopped_at[i] else {
                continue;
            };
            Self::evict(&mut self.windows[i], now_ns);
            if now_ns >= stop + NANOS_PER_SEC && self.windows[i].len() < self.entries[i].rate as usize {
                self.stopped_at[i] = None;
                out.push(RateEvent::Resume(i));
            }
        }
        out
    }
}
