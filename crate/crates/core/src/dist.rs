//! Explicit distributions over token-sequence spaces.
//!
//! Small enough state spaces are enumerated exactly; these containers back
//! every brute-force oracle in the test suites.

use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Sparse distribution over sequences (support list + probabilities).
#[derive(Debug, Clone)]
pub struct SparseSeqDist {
    support: Vec<Vec<usize>>,
    probs: Vec<f64>,
}

impl SparseSeqDist {
    pub fn new(support: Vec<Vec<usize>>, probs: Vec<f64>) -> Result<Self> {
        if support.len() != probs.len() {
            return Err(Error::Shape("support/probs length mismatch".into()));
        }
        if support.is_empty() {
            return Err(Error::Domain("empty support".into()));
        }
        let d = support[0].len();
        if support.iter().any(|s| s.len() != d) {
            return Err(Error::Shape("support sequences must share a length".into()));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Domain("probabilities must be finite and nonnegative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("probabilities sum to {total}, expected 1")));
        }
        Ok(Self { support, probs })
    }

    pub fn delta(sequence: Vec<usize>) -> Self {
        Self { support: vec![sequence], probs: vec![1.0] }
    }

    pub fn uniform(support: Vec<Vec<usize>>) -> Result<Self> {
        let n = support.len();
        if n == 0 {
            return Err(Error::Domain("empty support".into()));
        }
        let p = 1.0 / n as f64;
        Self::new(support, vec![p; n])
    }

    pub fn support(&self) -> &[Vec<usize>] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn seq_len(&self) -> usize {
        self.support[0].len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[usize], f64)> {
        self.support.iter().map(|s| s.as_slice()).zip(self.probs.iter().copied())
    }

    /// Probability of one exact sequence (0 if outside the support).
    pub fn prob_of(&self, seq: &[usize]) -> f64 {
        self.iter().filter(|(s, _)| *s == seq).map(|(_, p)| p).sum()
    }

    /// Marginal distribution of coordinate `i` over `[k]`.
    pub fn marginal(&self, i: usize, k: usize) -> Vec<f64> {
        let mut m = vec![0.0; k];
        for (s, p) in self.iter() {
            m[s[i]] += p;
        }
        m
    }
}

/// Dense distribution over the full product space `[k]^d`.
///
/// Sequences are indexed little-endian: coordinate 0 is the fastest-varying
/// digit of the rank.
#[derive(Debug, Clone)]
pub struct DenseSeqDist {
    k: usize,
    d: usize,
    probs: Vec<f64>,
}

impl DenseSeqDist {
    pub fn new(k: usize, d: usize, probs: Vec<f64>) -> Result<Self> {
        let expected = k.checked_pow(d as u32).ok_or_else(|| Error::Size("state space overflows".into()))?;
        if probs.len() != expected {
            return Err(Error::Shape(format!(
                "dense distribution over [{k}]^{d} needs {expected} entries, got {}",
                probs.len()
            )));
        }
        Ok(Self { k, d, probs })
    }

    pub fn zeros(k: usize, d: usize) -> Result<Self> {
        let n = k.checked_pow(d as u32).ok_or_else(|| Error::Size("state space overflows".into()))?;
        Ok(Self { k, d, probs: vec![0.0; n] })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn rank_of(&self, seq: &[usize]) -> usize {
        rank(seq, self.k)
    }

    pub fn seq_of(&self, rank: usize) -> Vec<usize> {
        unrank(rank, self.k, self.d)
    }

    pub fn prob_of(&self, seq: &[usize]) -> f64 {
        self.probs[self.rank_of(seq)]
    }

    pub fn add(&mut self, seq: &[usize], p: f64) {
        let r = rank(seq, self.k);
        self.probs[r] += p;
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }
}

pub fn rank(seq: &[usize], k: usize) -> usize {
    let mut r = 0usize;
    for &x in seq.iter().rev() {
        r = r * k + x;
    }
    r
}

pub fn unrank(mut r: usize, k: usize, d: usize) -> Vec<usize> {
    let mut seq = Vec::with_capacity(d);
    for _ in 0..d {
        seq.push(r % k);
        r /= k;
    }
    seq
}

/// Empirical distribution over observed sequences (for Monte Carlo checks).
#[derive(Debug, Clone, Default)]
pub struct EmpiricalDist {
    counts: BTreeMap<Vec<usize>, u64>,
    total: u64,
}

impl EmpiricalDist {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, seq: &[usize]) {
        *self.counts.entry(seq.to_vec()).or_insert(0) += 1;
        self.total += 1;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn freq(&self, seq: &[usize]) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        *self.counts.get(seq).unwrap_or(&0) as f64 / self.total as f64
    }

    /// Total variation distance to a sparse reference distribution.
    ///
    /// Sums |p_hat - q| over the union of supports.
    pub fn tv_to(&self, reference: &SparseSeqDist) -> f64 {
        let mut acc = 0.0;
        let mut seen_mass = 0.0;
        for (seq, q) in reference.iter() {
            let p = self.freq(seq);
            acc += (p - q).abs();
            seen_mass += p;
        }
        // Observed sequences outside the reference support.
        acc += 1.0 - seen_mass.min(1.0);
        0.5 * acc
    }
}
