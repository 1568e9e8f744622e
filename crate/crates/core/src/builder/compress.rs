//! Folding of consecutive repeated subsequences into counted units.

use serde::{Deserialize, Serialize};

/// One repeatable unit of a compressed trace.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Unit<T> {
    Single(T),
    /// Ordered flow sequence repeated as a whole.
    Group(Vec<T>),
}

impl<T: Clone> Unit<T> {
    pub fn body(&self) -> Vec<T> {
        match self {
            Unit::Single(x) => vec![x.clone()],
            Unit::Group(xs) => xs.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item<T> {
    pub unit: Unit<T>,
    pub counter: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressedTrace<T> {
    pub items: Vec<Item<T>>,
}

impl<T: Clone> CompressedTrace<T> {
    /// Repeats every unit `counter` times.
    pub fn expand(&self) -> Vec<T> {
        let mut out = Vec::new();
        for item in &self.items {
            for _ in 0..item.counter {
                out.extend(item.unit.body());
            }
        }
        out
    }

    pub fn units(&self) -> impl Iterator<Item = &Unit<T>> {
        self.items.iter().map(|i| &i.unit)
    }
}

/// Folds maximal runs of two or more identical adjacent windows.
///
/// Window lengths are tried from `len / 2` down to 1. At each length the
/// not-yet-folded spans are scanned left to right and every maximal run is
/// folded into one unit whose counter is the run length. Longer windows go
/// first so that a repeated sequence is not broken up by a shorter
/// repetition inside it. Windows that are themselves repetitions of a
/// shorter block (`BB`, `ABAB`) are left to the shorter length.
pub fn compress_trace<T: Clone + PartialEq>(steps: &[T]) -> CompressedTrace<T> {
    let n = steps.len();
    // Folded runs as (start, window, count), non-overlapping.
    let mut runs: Vec<(usize, usize, usize)> = Vec::new();
    let mut folded = vec![false; n];
    for w in (1..=n / 2).rev() {
        let mut span_start = 0;
        while span_start < n {
            if folded[span_start] {
                span_start += 1;
                continue;
            }
            let mut span_end = span_start;
            while span_end < n && !folded[span_end] {
                span_end += 1;
            }
            let mut i = span_start;
            while i + 2 * w <= span_end {
                if !is_primitive(&steps[i..i + w]) {
                    i += 1;
                    continue;
                }
                let mut count = 1;
                while i + (count + 1) * w <= span_end
                    && steps[i..i + w] == steps[i + count * w..i + (count + 1) * w]
                {
                    count += 1;
                }
                if count >= 2 {
                    runs.push((i, w, count));
                    i += count * w;
                } else {
                    i += 1;
                }
            }
            span_start = span_end;
        }
        for &(s, w, c) in &runs {
            folded[s..s + w * c].iter_mut().for_each(|f| *f = true);
        }
    }
    runs.sort_unstable();
    let mut items = Vec::new();
    let mut pos = 0;
    let mut next_run = runs.iter().peekable();
    while pos < n {
        match next_run.peek() {
            Some(&&(s, w, c)) if s == pos => {
                let unit = if w == 1 {
                    Unit::Single(steps[s].clone())
                } else {
                    Unit::Group(steps[s..s + w].to_vec())
                };
                items.push(Item { unit, counter: c as u32 });
                pos += w * c;
                next_run.next();
            }
            _ => {
                items.push(Item { unit: Unit::Single(steps[pos].clone()), counter: 1 });
                pos += 1;
            }
        }
    }
    CompressedTrace { items }
}

/// True unless `w` equals some shorter block repeated.
fn is_primitive<T: PartialEq>(w: &[T]) -> bool {
    let n = w.len();
    (1..n)
        .filter(|p| n % p == 0)
        .all(|p| (p..n).any(|i| w[i] != w[i - p]))
}

/// Collapses traces with the same unit sequence, keeping the maximum
/// counter per unit. Output keeps first-seen order.
pub fn merge_traces<T: Clone + PartialEq>(traces: &[CompressedTrace<T>]) -> Vec<CompressedTrace<T>> {
    let mut out: Vec<CompressedTrace<T>> = Vec::new();
    for t in traces {
        let same = out.iter_mut().find(|o| {
            o.items.len() == t.items.len() && o.units().zip(t.units()).all(|(a, b)| a == b)
        });
        match same {
            Some(o) => {
                for (a, b) in o.items.iter_mut().zip(&t.items) {
                    a.counter = a.counter.max(b.counter);
                }
            }
            None => out.push(t.clone()),
        }
    }
    out
}
