//! Instrumentation for oscillating parameters: integer-code flip counting over a
//! sliding window, scale-factor traces and latent-weight boundary histograms.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::quant::{round_half_away, QuantizerState};
use crate::{Error, Result, Tensor};

/// Counts how often each parameter's integer code changed within the last
/// `window` recorded steps, and keeps the full history of every scale.
#[derive(Clone, Debug)]
pub struct OscillationTracker {
    window: usize,
    last_codes: Option<Vec<i64>>,
    /// One bitset per transition inside the window; bit `i` set if parameter `i` flipped.
    transitions: VecDeque<Vec<u64>>,
    flip_counts: Vec<u32>,
    steps: usize,
    scale_names: Vec<String>,
    scale_traces: Vec<Vec<f64>>,
}

impl OscillationTracker {
    pub fn new(window: usize, scale_names: Vec<String>) -> Result<Self> {
        if window < 2 {
            return Err(Error::Argument(format!("flip window must be >= 2, got {window}")));
        }
        let scale_traces = vec![Vec::new(); scale_names.len()];
        Ok(Self {
            window,
            last_codes: None,
            transitions: VecDeque::new(),
            flip_counts: Vec::new(),
            steps: 0,
            scale_names,
            scale_traces,
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Total number of steps recorded since construction.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Steps currently inside the window.
    pub fn steps_in_window(&self) -> usize {
        self.steps.min(self.window)
    }

    pub fn flip_counts(&self) -> &[u32] {
        &self.flip_counts
    }

    pub fn scale_names(&self) -> &[String] {
        &self.scale_names
    }

    pub fn scale_trace(&self, index: usize) -> &[f64] {
        &self.scale_traces[index]
    }

    pub fn scale_traces(&self) -> &[Vec<f64>] {
        &self.scale_traces
    }

    pub fn num_params(&self) -> usize {
        self.flip_counts.len()
    }

    /// Records one step of integer codes and scale values.
    pub fn record_step(&mut self, codes: &[i64], scales: &[f64]) -> Result<()> {
        if scales.len() != self.scale_traces.len() {
            return Err(Error::Argument(format!(
                "expected {} scale values, got {}",
                self.scale_traces.len(),
                scales.len()
            )));
        }
        match &mut self.last_codes {
            None => {
                self.last_codes = Some(codes.to_vec());
                self.flip_counts = vec![0; codes.len()];
            }
            Some(prev) => {
                if prev.len() != codes.len() {
                    return Err(Error::Argument(format!(
                        "code count changed mid-run: {} -> {}",
                        prev.len(),
                        codes.len()
                    )));
                }
                let mut bits = vec![0u64; codes.len().div_ceil(64)];
                for (i, (p, c)) in prev.iter_mut().zip(codes).enumerate() {
                    if p != c {
                        bits[i / 64] |= 1 << (i % 64);
                        self.flip_counts[i] += 1;
                        *p = *c;
                    }
                }
                self.transitions.push_back(bits);
                if self.transitions.len() > self.window - 1 {
                    let old = self.transitions.pop_front().expect("non-empty");
                    for (word_idx, word) in old.iter().enumerate() {
                        let mut w = *word;
                        while w != 0 {
                            let bit = w.trailing_zeros() as usize;
                            self.flip_counts[word_idx * 64 + bit] -= 1;
                            w &= w - 1;
                        }
                    }
                }
            }
        }
        for (trace, &s) in self.scale_traces.iter_mut().zip(scales) {
            trace.push(s);
        }
        self.steps += 1;
        Ok(())
    }

    /// Flips per transition inside the window, per parameter.
    pub fn flip_frequency(&self) -> Result<Vec<f64>> {
        let n = self.steps_in_window();
        if n < 2 {
            return Err(Error::State(format!("flip frequency needs >= 2 steps, have {n}")));
        }
        let denom = (n - 1) as f64;
        Ok(self.flip_counts.iter().map(|&c| c as f64 / denom).collect())
    }

    /// Fraction of parameters whose flip frequency exceeds `threshold`.
    pub fn oscillating_fraction(&self, threshold: f64) -> Result<f64> {
        let f = self.flip_frequency()?;
        if f.is_empty() {
            return Ok(0.0);
        }
        Ok(f.iter().filter(|&&v| v > threshold).count() as f64 / f.len() as f64)
    }
}

/// Counts of in-range elements by distance to the nearest rounding threshold,
/// `d = |frac(w / s) - 0.5|` over `[0, 0.5]`. Bin 0 holds elements on a
/// threshold, the last bin elements on a level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoundaryHistogram {
    pub bins: Vec<u64>,
}

impl BoundaryHistogram {
    pub fn bin_count(&self) -> usize {
        self.bins.len()
    }

    pub fn total(&self) -> u64 {
        self.bins.iter().sum()
    }

    /// Fraction of mass with `d < limit`, counting whole bins whose upper edge is `<= limit`.
    pub fn mass_below(&self, limit: f64) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let width = 0.5 / self.bins.len() as f64;
        let below: u64 = self
            .bins
            .iter()
            .enumerate()
            .filter(|(i, _)| (*i + 1) as f64 * width <= limit + 1e-12)
            .map(|(_, c)| c)
            .sum();
        below as f64 / total as f64
    }

    pub fn merge(&mut self, other: &BoundaryHistogram) -> Result<()> {
        if other.bins.len() != self.bins.len() {
            return Err(Error::Argument("histogram bin counts differ".into()));
        }
        for (a, b) in self.bins.iter_mut().zip(&other.bins) {
            *a += b;
        }
        Ok(())
    }
}

pub fn boundary_histogram(w: &Tensor, q: &QuantizerState, bins: usize) -> Result<BoundaryHistogram> {
    if bins < 2 {
        return Err(Error::Argument(format!("need at least 2 bins, got {bins}")));
    }
    let layout = q.layout(w.shape())?;
    let (u, v) = (q.lower() as f64, q.upper() as f64);
    let scales = q.scale.data();
    let mut counts = vec![0u64; bins];
    for (i, &x) in w.data().iter().enumerate() {
        let z = x / scales[layout.channel_of(i)];
        let r = round_half_away(z);
        if r < u || r > v {
            continue;
        }
        let frac = z - libm::floor(z);
        let d = (frac - 0.5).abs();
        let b = ((d / 0.5) * bins as f64) as usize;
        counts[b.min(bins - 1)] += 1;
    }
    Ok(BoundaryHistogram { bins: counts })
}
