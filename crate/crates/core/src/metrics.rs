//! Evaluation metrics and machine-readable reports.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Total variation distance `0.5 * sum |p - q|` over a shared support
/// enumeration.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "tv_distance support mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// KL divergence `sum p ln(p/q)` with an absolute-continuity check:
/// `q(x) = 0 < p(x)` yields `+inf`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "kl_divergence support mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Ok(f64::INFINITY);
        }
        acc += pi * (pi / qi).ln();
    }
    Ok(acc)
}

/// Mean reciprocal rank of the true item. `ranks` are 1-indexed.
pub fn mean_reciprocal_rank(ranks: &[usize]) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64
}

/// Expected MRR of a uniformly random ranking over `n` candidates:
/// `(sum_{r=1}^{n} 1/r) / n`.
pub fn random_ranking_mrr(n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    (1..=n).map(|r| 1.0 / r as f64).sum::<f64>() / n as f64
}

/// Cosine similarity of two equal-length vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// A named-scalar experiment report.
///
/// `metrics` are deterministic given config + seed. Wall-clock measurements
/// live in `timing` and are excluded (together with `timestamp`) from
/// reproducibility comparisons.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub pipeline: String,
    pub config_hash: String,
    pub seed: u64,
    pub timestamp: u64,
    pub metrics: BTreeMap<String, f64>,
    pub timing: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn new(pipeline: &str, config_hash: String, seed: u64) -> Self {
        let timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            pipeline: pipeline.to_string(),
            config_hash,
            seed,
            timestamp,
            metrics: BTreeMap::new(),
            timing: BTreeMap::new(),
        }
    }

    pub fn put(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), value);
    }

    pub fn put_timing(&mut self, name: &str, value: f64) {
        self.timing.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    /// Every metric must be finite for the report to be written.
    pub fn validate(&self) -> Result<()> {
        for (k, v) in &self.metrics {
            if !v.is_finite() {
                return Err(Error::Domain(format!("metric {k} is not finite: {v}")));
            }
        }
        Ok(())
    }

    /// Canonical JSON of the deterministic part (drops timestamp + timing).
    pub fn deterministic_json(&self) -> String {
        #[derive(Serialize)]
        struct View<'a> {
            pipeline: &'a str,
            config_hash: &'a str,
            seed: u64,
            metrics: &'a BTreeMap<String, f64>,
        }
        serde_json::to_string_pretty(&View {
            pipeline: &self.pipeline,
            config_hash: &self.config_hash,
            seed: self.seed,
            metrics: &self.metrics,
        })
        .expect("report serialization cannot fail")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }
}
