//! Window bookkeeping and the pair-age table.

use serde::{Deserialize, Serialize};

/// A contiguous, inclusive range of frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub iteration: usize,
    pub index: usize,
    pub first: usize,
    pub last: usize,
    pub length: usize,
}

impl Window {
    pub fn contains(&self, frame: usize) -> bool {
        self.first <= frame && frame <= self.last
    }

    pub fn frames(&self) -> std::ops::RangeInclusive<usize> {
        self.first..=self.last
    }
}

/// Windows of `length` frames starting at multiples of `length / 2`; the last
/// one ends at frame `n - 1`.
pub fn make_windows(n: usize, length: usize, iteration: usize) -> Vec<Window> {
    assert!(length >= 1, "window length must be positive");
    if n == 0 {
        return Vec::new();
    }
    let step = (length / 2).max(1);
    let mut out = Vec::new();
    let mut first = 0;
    loop {
        let last = (first + length - 1).min(n - 1);
        out.push(Window { iteration, index: out.len(), first, last, length });
        if last == n - 1 {
            break;
        }
        first += step;
    }
    out
}

/// Window lengths used so far, which fixes how long every frame pair has
/// shared a window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowHistory {
    pub frames: usize,
    pub lengths: Vec<usize>,
}

fn share_window(a: usize, b: usize, n: usize, length: usize) -> bool {
    let (lo, hi) = (a.min(b), a.max(b));
    if hi >= n {
        return false;
    }
    if length >= n {
        return true;
    }
    let step = (length / 2).max(1);
    // Windows containing `lo` start at most at `lo`; the latest such start
    // reaches furthest.
    let last_start_needed = n.saturating_sub(length).div_ceil(step) * step;
    let start = (lo / step * step).min(last_start_needed);
    let end = (start + length - 1).min(n - 1);
    hi <= end
}

impl WindowHistory {
    pub fn new(frames: usize) -> Self {
        Self { frames, lengths: Vec::new() }
    }

    pub fn push(&mut self, length: usize) {
        self.lengths.push(length);
    }

    /// Index of the latest iteration.
    pub fn current(&self) -> Option<usize> {
        self.lengths.len().checked_sub(1)
    }

    /// First iteration in which frames `a` and `b` shared a window.
    pub fn first_shared(&self, a: usize, b: usize) -> Option<usize> {
        self.lengths.iter().position(|&l| share_window(a, b, self.frames, l))
    }

    /// Iterations elapsed since `a` and `b` first shared a window, counted at
    /// the latest iteration (0 when they first meet now).
    pub fn pair_age(&self, a: usize, b: usize) -> usize {
        match (self.current(), self.first_shared(a, b)) {
            (Some(cur), Some(first)) => cur - first,
            _ => 0,
        }
    }
}

/// Linear ramp of the correspondence thresholds from `(start_distance,
/// start_angle)` at age 0 down to `(end_distance, end_angle)` at `ramp` and beyond.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSchedule {
    pub start_distance: f64,
    pub start_angle_deg: f64,
    pub end_distance: f64,
    pub end_angle_deg: f64,
    pub ramp_iters: usize,
}

impl Default for ThresholdSchedule {
    fn default() -> Self {
        Self { start_distance: 0.5, start_angle_deg: 45.0, end_distance: 0.15, end_angle_deg: 20.0, ramp_iters: 4 }
    }
}

impl ThresholdSchedule {
    /// `(max distance in m, max angle in degrees)` for a pair of the given age.
    pub fn at(&self, age: usize) -> (f64, f64) {
        if age == 0 {
            return (self.start_distance, self.start_angle_deg);
        }
        if self.ramp_iters == 0 || age >= self.ramp_iters {
            return (self.end_distance, self.end_angle_deg);
        }
        let s = age as f64 / self.ramp_iters as f64;
        (
            self.start_distance + (self.end_distance - self.start_distance) * s,
            self.start_angle_deg + (self.end_angle_deg - self.start_angle_deg) * s,
        )
    }
}
