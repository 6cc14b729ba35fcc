//! Delay histograms and windowed coincidence matching over sorted tag streams.
//!
//! Delays follow τ_AB = t_A − t_B: a pair where Bob's photon took the long
//! arm lands at −τ.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_sim::TimeTagStream;
use crate::par::{self, Parallelism};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CoincidenceError {
    #[error("tags on channel {channel} are not sorted (index {index})")]
    Unsorted { channel: u8, index: usize },
    #[error("coincidence half width must be > 0 ps, got {0}")]
    NonPositiveWidth(i64),
    #[error("histogram bin width {bin_width} ps must be > 0 and divide 2 x range {range} ps")]
    BadBinning { bin_width: u64, range: u64 },
    #[error("coincidence windows overlap")]
    OverlappingWindows,
}

/// Accepts a pair when |t_A − t_B − offset| ≤ half_width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoincidenceWindow {
    pub offset_ps: i64,
    pub half_width_ps: i64,
}

impl CoincidenceWindow {
    pub fn new(offset_ps: i64, half_width_ps: i64) -> Result<Self, CoincidenceError> {
        if half_width_ps <= 0 {
            return Err(CoincidenceError::NonPositiveWidth(half_width_ps));
        }
        Ok(CoincidenceWindow {
            offset_ps,
            half_width_ps,
        })
    }

    pub fn contains(&self, delay_ps: i64) -> bool {
        (delay_ps - self.offset_ps).abs() <= self.half_width_ps
    }

    fn lo(&self) -> i64 {
        self.offset_ps - self.half_width_ps
    }

    fn hi(&self) -> i64 {
        self.offset_ps + self.half_width_ps
    }
}

/// Three disjoint windows at −τ, 0 and +τ.
pub fn slot_windows(tau_ps: f64, half_width_ps: i64) -> Result<[CoincidenceWindow; 3], CoincidenceError> {
    let t = tau_ps.round() as i64;
    let windows = [
        CoincidenceWindow::new(-t, half_width_ps)?,
        CoincidenceWindow::new(0, half_width_ps)?,
        CoincidenceWindow::new(t, half_width_ps)?,
    ];
    check_disjoint(&windows)?;
    Ok(windows)
}

fn check_disjoint(windows: &[CoincidenceWindow]) -> Result<(), CoincidenceError> {
    let mut sorted = windows.to_vec();
    sorted.sort_by_key(|w| w.offset_ps);
    if sorted.windows(2).any(|w| w[0].hi() >= w[1].lo()) {
        return Err(CoincidenceError::OverlappingWindows);
    }
    Ok(())
}

/// Histogram of t_A − t_B over all tag pairs within ±range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelayHistogram {
    pub bin_width_ps: u64,
    pub range_ps: u64,
    /// Bin k covers [−range + k·w, −range + (k+1)·w); the last bin also
    /// includes +range.
    pub counts: Vec<u64>,
}

impl DelayHistogram {
    pub fn bin_center_ps(&self, k: usize) -> f64 {
        -(self.range_ps as f64) + (k as f64 + 0.5) * self.bin_width_ps as f64
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts in bins whose centers fall in [lo, hi].
    pub fn area(&self, lo_ps: f64, hi_ps: f64) -> u64 {
        self.counts
            .iter()
            .enumerate()
            .filter(|(k, _)| (lo_ps..=hi_ps).contains(&self.bin_center_ps(*k)))
            .map(|(_, c)| c)
            .sum()
    }

    fn bin_of(&self, delay: i64) -> usize {
        let k = ((delay + self.range_ps as i64) as u64 / self.bin_width_ps) as usize;
        k.min(self.counts.len() - 1)
    }
}

fn check_sorted(s: &TimeTagStream) -> Result<(), CoincidenceError> {
    match s.tags.windows(2).position(|w| w[0] > w[1]) {
        Some(index) => Err(CoincidenceError::Unsorted {
            channel: s.channel,
            index: index + 1,
        }),
        None => Ok(()),
    }
}

pub fn delay_histogram(
    a: &TimeTagStream,
    b: &TimeTagStream,
    bin_width_ps: u64,
    range_ps: u64,
) -> Result<DelayHistogram, CoincidenceError> {
    delay_histogram_with(a, b, bin_width_ps, range_ps, Parallelism::default())
}

/// Sliding-window sweep: each A tag only visits the B tags within ±range.
/// The A stream is split into fixed chunks whose partial histograms are summed.
pub fn delay_histogram_with(
    a: &TimeTagStream,
    b: &TimeTagStream,
    bin_width_ps: u64,
    range_ps: u64,
    par: Parallelism,
) -> Result<DelayHistogram, CoincidenceError> {
    check_sorted(a)?;
    check_sorted(b)?;
    if bin_width_ps == 0 || range_ps == 0 || !(2 * range_ps).is_multiple_of(bin_width_ps) {
        return Err(CoincidenceError::BadBinning {
            bin_width: bin_width_ps,
            range: range_ps,
        });
    }
    let mut hist = DelayHistogram {
        bin_width_ps,
        range_ps,
        counts: vec![0; (2 * range_ps / bin_width_ps) as usize],
    };
    let range = range_ps as i64;
    let (ta, tb) = (&a.tags, &b.tags);

    let partials = par::map_chunks(par::chunk_count(ta.len()), par, |c| {
        let span = par::chunk_range(ta.len(), c);
        let mut counts = vec![0u64; hist.counts.len()];
        let first = ta[span.start] as i64 - range;
        let mut lo = tb.partition_point(|&t| (t as i64) < first);
        for &t_a in &ta[span] {
            let t_a = t_a as i64;
            while lo < tb.len() && (tb[lo] as i64) < t_a - range {
                lo += 1;
            }
            for &t_b in tb[lo..].iter().take_while(|&&t| t as i64 <= t_a + range) {
                counts[hist.bin_of(t_a - t_b as i64)] += 1;
            }
        }
        counts
    });
    for part in partials {
        for (dst, src) in hist.counts.iter_mut().zip(part) {
            *dst += src;
        }
    }
    Ok(hist)
}

/// Result of one-to-one matching: index pairs (i into A, j into B).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Matches {
    pub count: usize,
    pub pairs: Vec<(usize, usize)>,
}

impl Matches {
    fn push(&mut self, i: usize, j: usize) {
        self.count += 1;
        self.pairs.push((i, j));
    }
}

/// Greedy in-order one-to-one matching in a single window. A tags are taken
/// in time order; each takes the earliest unmatched B tag inside its window.
/// Linear in the total number of tags.
pub fn match_coincidences(
    a: &TimeTagStream,
    b: &TimeTagStream,
    win: &CoincidenceWindow,
) -> Result<Matches, CoincidenceError> {
    check_sorted(a)?;
    check_sorted(b)?;
    if win.half_width_ps <= 0 {
        return Err(CoincidenceError::NonPositiveWidth(win.half_width_ps));
    }
    let mut out = Matches::default();
    let mut j = 0;
    for (i, &t_a) in a.tags.iter().enumerate() {
        // B times that pair with this A tag: [t_a − offset − w, t_a − offset + w]
        let target = t_a as i64 - win.offset_ps;
        while j < b.tags.len() && (b.tags[j] as i64) < target - win.half_width_ps {
            j += 1;
        }
        if j < b.tags.len() && (b.tags[j] as i64) <= target + win.half_width_ps {
            out.push(i, j);
            j += 1;
        }
    }
    Ok(out)
}

/// Greedy matching against several disjoint windows at once; each tag is
/// used at most once across all windows. Returns one result per window, in
/// the order given.
pub fn match_slots(
    a: &TimeTagStream,
    b: &TimeTagStream,
    windows: &[CoincidenceWindow],
) -> Result<Vec<Matches>, CoincidenceError> {
    check_sorted(a)?;
    check_sorted(b)?;
    for w in windows {
        if w.half_width_ps <= 0 {
            return Err(CoincidenceError::NonPositiveWidth(w.half_width_ps));
        }
    }
    check_disjoint(windows)?;
    let mut out = vec![Matches::default(); windows.len()];
    if windows.is_empty() {
        return Ok(out);
    }
    let min_lo = windows.iter().map(CoincidenceWindow::lo).min().unwrap();
    let max_hi = windows.iter().map(CoincidenceWindow::hi).max().unwrap();

    // Unmatched B candidates in time order, within reach of the current A tag.
    let mut pending: VecDeque<usize> = VecDeque::new();
    let mut next_b = 0;
    for (i, &t_a) in a.tags.iter().enumerate() {
        let t_a = t_a as i64;
        // delay = t_a − t_b ∈ [min_lo, max_hi]  ⇔  t_b ∈ [t_a − max_hi, t_a − min_lo]
        while next_b < b.tags.len() && (b.tags[next_b] as i64) <= t_a - min_lo {
            pending.push_back(next_b);
            next_b += 1;
        }
        while pending.front().is_some_and(|&j| (b.tags[j] as i64) < t_a - max_hi) {
            pending.pop_front();
        }
        let hit = pending.iter().enumerate().find_map(|(slot, &j)| {
            let delay = t_a - b.tags[j] as i64;
            windows.iter().position(|w| w.contains(delay)).map(|w| (slot, j, w))
        });
        if let Some((slot, j, w)) = hit {
            pending.remove(slot);
            out[w].push(i, j);
        }
    }
    Ok(out)
}
