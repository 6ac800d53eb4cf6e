//! Time schedules and conditional probability paths.
//!
//! Two path families are supported per coordinate:
//! - mixture: `p_t(x|x1) = (1 - kappa(t)) p(x) + kappa(t) delta_{x1}(x)`,
//! - metric-induced: `p_t(x|x1) = softmax_x(-beta(t) d(x, x1))` with
//!   `beta(t) = c (t / (1-t))^a` over a cosine token-distance matrix.
//!
//! `beta` diverges at `t = 1`; evaluations clamp to `t <= 1 - EPS_CLAMP` and
//! flag the clamp. The sampler never needs `beta(1)`: its final step writes
//! predicted clean tokens directly.

use crate::dist::{DenseSeqDist, SparseSeqDist};
use crate::error::{Error, Result};
use crate::rng;
use crate::vocab::{DistanceMatrix, Segment, TokenSequence, Vocabulary};
use rand::RngCore;

/// Clamp margin for metric-path evaluations near `t = 1`.
pub const EPS_CLAMP: f64 = 1e-3;

/// Default cap for exact marginal enumeration: `|support(q)| * K^D` states.
pub const DEFAULT_MARGINAL_CAP: usize = 1_000_000;

/// Monotone interpolation schedule `kappa: [0,1] -> [0,1]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "exponent")]
pub enum KappaSchedule {
    /// `kappa(t) = t`.
    Linear,
    /// `kappa(t) = t^p`, `p > 0`.
    Power(f64),
}

impl KappaSchedule {
    pub fn value(&self, t: f64) -> f64 {
        match self {
            KappaSchedule::Linear => t,
            KappaSchedule::Power(p) => t.powf(*p),
        }
    }
}

/// Base (source) distribution for mixture paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseDistribution {
    /// Uniform over `[K]`.
    Uniform,
    /// All mass on the PAD token (masked-diffusion style source).
    Mask,
}

impl BaseDistribution {
    pub fn prob(&self, x: usize, vocab: &Vocabulary) -> f64 {
        match self {
            BaseDistribution::Uniform => 1.0 / vocab.size() as f64,
            BaseDistribution::Mask => {
                if x == vocab.pad() {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// `beta(t)` evaluation; `clamped` marks evaluations pulled back from `t >= 1 - eps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaValue {
    pub value: f64,
    pub clamped: bool,
}

/// A conditional probability path.
#[derive(Debug, Clone)]
pub enum PathSchedule {
    Mixture {
        kappa: KappaSchedule,
        base: BaseDistribution,
    },
    Metric {
        c: f64,
        a: f64,
        distances: DistanceMatrix,
    },
}

impl PathSchedule {
    pub fn mixture(kappa: KappaSchedule, base: BaseDistribution) -> Self {
        PathSchedule::Mixture { kappa, base }
    }

    /// Metric path over the vocabulary's cosine distances.
    pub fn metric(c: f64, a: f64, vocab: &Vocabulary) -> Result<Self> {
        if c <= 0.0 || a <= 0.0 {
            return Err(Error::Domain(format!("metric path needs c > 0, a > 0; got c={c} a={a}")));
        }
        Ok(PathSchedule::Metric { c, a, distances: vocab.cosine_distances() })
    }

    pub fn is_metric(&self) -> bool {
        matches!(self, PathSchedule::Metric { .. })
    }

    fn check_time(t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t) || !t.is_finite() {
            return Err(Error::Domain(format!("time {t} outside [0, 1]")));
        }
        Ok(())
    }

    /// `kappa(t)` for mixture schedules; endpoints exact.
    pub fn kappa_at(&self, t: f64) -> Result<f64> {
        Self::check_time(t)?;
        match self {
            PathSchedule::Mixture { kappa, .. } => {
                if t == 0.0 {
                    Ok(0.0)
                } else if t == 1.0 {
                    Ok(1.0)
                } else {
                    Ok(kappa.value(t))
                }
            }
            PathSchedule::Metric { .. } => {
                Err(Error::Unsupported("kappa_at is defined for mixture schedules only".into()))
            }
        }
    }

    /// `beta(t) = c (t/(1-t))^a` for metric schedules, clamped near `t = 1`.
    pub fn beta_at(&self, t: f64) -> Result<BetaValue> {
        Self::check_time(t)?;
        match self {
            PathSchedule::Metric { c, a, .. } => {
                let clamped = t >= 1.0 - EPS_CLAMP;
                let te = if clamped { 1.0 - EPS_CLAMP } else { t };
                if te == 0.0 {
                    return Ok(BetaValue { value: 0.0, clamped });
                }
                Ok(BetaValue { value: c * (te / (1.0 - te)).powf(*a), clamped })
            }
            PathSchedule::Mixture { .. } => {
                Err(Error::Unsupported("beta_at is defined for metric schedules only".into()))
            }
        }
    }

    /// `p_t(x | x1)` for a single coordinate.
    pub fn conditional_prob(&self, vocab: &Vocabulary, x: usize, x1: usize, t: f64) -> Result<f64> {
        let row = self.conditional_row(vocab, x1, t)?;
        row.get(x)
            .copied()
            .ok_or_else(|| Error::Domain(format!("token {x} >= K={}", vocab.size())))
    }

    /// The full conditional distribution `p_t(. | x1)` over `[K]`.
    pub fn conditional_row(&self, vocab: &Vocabulary, x1: usize, t: f64) -> Result<Vec<f64>> {
        Self::check_time(t)?;
        let k = vocab.size();
        if x1 >= k {
            return Err(Error::Domain(format!("token {x1} >= K={k}")));
        }
        match self {
            PathSchedule::Mixture { base, .. } => {
                let kt = self.kappa_at(t)?;
                let mut row: Vec<f64> = (0..k).map(|x| (1.0 - kt) * base.prob(x, vocab)).collect();
                row[x1] += kt;
                Ok(row)
            }
            PathSchedule::Metric { distances, .. } => {
                if distances.k() != k {
                    return Err(Error::Shape(format!(
                        "distance matrix K={} does not match vocabulary K={k}",
                        distances.k()
                    )));
                }
                let beta = self.beta_at(t)?.value;
                // Softmax with the max trick; scores are -beta * d.
                let scores: Vec<f64> = (0..k).map(|x| -beta * distances.get(x, x1)).collect();
                Ok(softmax(&scores))
            }
        }
    }

    /// All conditional rows at once: `matrix[x1][x] = p_t(x | x1)`.
    pub fn conditional_matrix(&self, vocab: &Vocabulary, t: f64) -> Result<Vec<Vec<f64>>> {
        (0..vocab.size())
            .map(|x1| self.conditional_row(vocab, x1, t))
            .collect()
    }

    /// The distribution at `t = 0` (independent of `x1`): the source the
    /// sampler initializes response regions from.
    pub fn source_row(&self, vocab: &Vocabulary) -> Vec<f64> {
        match self {
            PathSchedule::Mixture { base, .. } => {
                (0..vocab.size()).map(|x| base.prob(x, vocab)).collect()
            }
            // beta(0) = 0: uniform.
            PathSchedule::Metric { .. } => vec![1.0 / vocab.size() as f64; vocab.size()],
        }
    }

    /// Sample `x_t ~ p_t(. | x1)` coordinatewise (factorized path).
    pub fn sample_conditional<R: RngCore>(
        &self,
        vocab: &Vocabulary,
        x1: &TokenSequence,
        t: f64,
        rng: &mut R,
    ) -> Result<TokenSequence> {
        Self::check_time(t)?;
        let mut tokens = Vec::with_capacity(x1.len());
        for i in 0..x1.len() {
            let row = self.conditional_row(vocab, x1.token(i), t)?;
            tokens.push(rng::sample_weighted(rng, &row));
        }
        Ok(TokenSequence::from_parts_unchecked(
            tokens,
            vec![Segment::Response; x1.len()],
        ))
    }

    /// Corrupt only the response span of `x1`, leaving instruction and pad
    /// coordinates clean; the form used by the training objective.
    pub fn corrupt_response<R: RngCore>(
        &self,
        vocab: &Vocabulary,
        x1: &TokenSequence,
        t: f64,
        rng: &mut R,
    ) -> Result<TokenSequence> {
        Self::check_time(t)?;
        let mut out = x1.clone();
        for i in 0..x1.len() {
            if x1.segment(i) == Segment::Response {
                let row = self.conditional_row(vocab, x1.token(i), t)?;
                out.set_token(i, rng::sample_weighted(rng, &row));
            }
        }
        Ok(out)
    }

    /// Exact marginal `p_t(x) = sum_{x1} p_t(x|x1) q(x1)` by full enumeration.
    ///
    /// This operation *is* the brute-force oracle the samplers are verified
    /// against; it stays deliberately naive.
    pub fn marginal_oracle(
        &self,
        vocab: &Vocabulary,
        q: &SparseSeqDist,
        t: f64,
        cap: usize,
    ) -> Result<DenseSeqDist> {
        Self::check_time(t)?;
        let k = vocab.size();
        let d = q.seq_len();
        let states = k
            .checked_pow(d as u32)
            .ok_or_else(|| Error::Size("K^D overflows".into()))?;
        let work = states
            .checked_mul(q.support().len())
            .ok_or_else(|| Error::Size("|support| * K^D overflows".into()))?;
        if work > cap {
            return Err(Error::Size(format!(
                "|support| * K^D = {work} exceeds cap {cap}"
            )));
        }
        // Per-support conditional rows, one per coordinate.
        let mut rows: Vec<Vec<Vec<f64>>> = Vec::with_capacity(q.support().len());
        for x1 in q.support() {
            let per_coord: Result<Vec<Vec<f64>>> = x1
                .iter()
                .map(|&x1i| self.conditional_row(vocab, x1i, t))
                .collect();
            rows.push(per_coord?);
        }
        let mut out = DenseSeqDist::zeros(k, d)?;
        let mut seq = vec![0usize; d];
        for r in 0..states {
            let mut rr = r;
            for s in seq.iter_mut() {
                *s = rr % k;
                rr /= k;
            }
            let mut total = 0.0;
            for (support_idx, qp) in q.probs().iter().enumerate() {
                let mut prod = *qp;
                for (i, &xi) in seq.iter().enumerate() {
                    prod *= rows[support_idx][i][xi];
                    if prod == 0.0 {
                        break;
                    }
                }
                total += prod;
            }
            out.add(&seq, total);
        }
        Ok(out)
    }
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}
