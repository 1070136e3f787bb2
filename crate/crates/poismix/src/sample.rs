//! Count samples and their relative frequencies.

use nalgebra::DVector;

use crate::error::{Error, Result};

/// A sample of nonnegative counts together with the relative frequencies
/// `nu_l` for `l = 0..=max(Y)`.
///
/// The last frequency bin is corrected so the frequencies sum to 1 exactly
/// in floating point.
#[derive(Debug, Clone)]
pub struct CountSample {
    counts: Vec<u64>,
    frequencies: Vec<f64>,
}

impl CountSample {
    pub fn new(counts: Vec<u64>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Config("count sample must be nonempty".into()));
        }
        let max = *counts.iter().max().expect("nonempty") as usize;
        let n = counts.len() as f64;
        let mut tally = vec![0u64; max + 1];
        for &c in &counts {
            tally[c as usize] += 1;
        }
        let mut frequencies: Vec<f64> = tally.iter().map(|&c| c as f64 / n).collect();
        let head: f64 = frequencies[..max].iter().sum();
        frequencies[max] = 1.0 - head;
        Ok(Self { counts, frequencies })
    }

    pub fn n(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn max_count(&self) -> u64 {
        (self.frequencies.len() - 1) as u64
    }

    /// Relative frequencies `nu_0, ..., nu_max`.
    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    /// `nu_0`, the relative frequency of zero counts.
    pub fn nu0(&self) -> f64 {
        self.frequencies[0]
    }

    /// Frequencies folded into `l_max` bins: mass of counts `>= l_max` is
    /// added to the last bin. Returns the vector and the number of
    /// observations that were clamped.
    pub fn clamped_frequencies(&self, l_max: usize) -> (DVector<f64>, usize) {
        assert!(l_max >= 1, "truncation level must be >= 1");
        let mut out = DVector::zeros(l_max);
        for (l, &f) in self.frequencies.iter().enumerate() {
            out[l.min(l_max - 1)] += f;
        }
        let clamped = self.counts.iter().filter(|&&c| c as usize >= l_max).count();
        (out, clamped)
    }

    /// Default count-truncation level: max observed count + 30.
    pub fn default_truncation(&self) -> usize {
        self.max_count() as usize + 30
    }

    /// Default grid upper bound: max count + 5 sqrt(max count), floored at 10
    /// so degenerate all-zero samples still get a usable grid.
    pub fn default_lambda_max(&self) -> f64 {
        let m = self.max_count() as f64;
        (m + 5.0 * m.sqrt()).max(10.0)
    }
}
