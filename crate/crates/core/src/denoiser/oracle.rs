//! Exact posterior `p_{1|t}(x1^i | x_t)` by Bayes over an enumerable target
//! distribution. This is the reference denoiser every sampler and training
//! check is measured against.

use crate::denoiser::DenoiserOutput;
use crate::dist::SparseSeqDist;
use crate::error::{Error, Result};
use crate::schedule::PathSchedule;
use crate::vocab::{TokenSequence, Vocabulary};

/// Support cap for posterior enumeration.
pub const DEFAULT_POSTERIOR_CAP: usize = 100_000;

/// Posterior logits for every position of `x_t` under target `q`.
///
/// `logits[i][v] = log sum_{x1 in support, x1^i = v} q(x1) prod_j p_t(x_t^j | x1^j)`,
/// normalized per position. Zero total likelihood falls back to a uniform
/// posterior with the `degenerate` flag set.
pub fn oracle_posterior(
    q: &SparseSeqDist,
    schedule: &PathSchedule,
    vocab: &Vocabulary,
    x_t: &TokenSequence,
    t: f64,
    cap: usize,
) -> Result<DenoiserOutput> {
    if q.support().len() > cap {
        return Err(Error::Size(format!(
            "posterior support {} exceeds cap {cap}",
            q.support().len()
        )));
    }
    let d = x_t.len();
    if q.seq_len() != d {
        return Err(Error::Shape(format!(
            "q is over length-{} sequences but x_t has length {d}",
            q.seq_len()
        )));
    }
    let k = vocab.size();
    let rows = schedule.conditional_matrix(vocab, t)?;

    // Likelihood weight of each support sequence given the observation.
    let mut weights = Vec::with_capacity(q.support().len());
    let mut total = 0.0;
    for (x1, qp) in q.iter() {
        let mut w = qp;
        for j in 0..d {
            if w == 0.0 {
                break;
            }
            w *= rows[x1[j]][x_t.token(j)];
        }
        total += w;
        weights.push(w);
    }

    let mut logits = vec![vec![0.0f64; k]; d];
    let degenerate = total <= 0.0;
    if degenerate {
        let v = (1.0 / k as f64).ln();
        for row in logits.iter_mut() {
            row.iter_mut().for_each(|l| *l = v);
        }
    } else {
        for (i, row) in logits.iter_mut().enumerate() {
            let mut post = vec![0.0f64; k];
            for (x1, &w) in q.support().iter().zip(&weights) {
                post[x1[i]] += w;
            }
            for (v, l) in post.iter().zip(row.iter_mut()) {
                // Keep logits finite; softmax recovers the row to ~1e-300.
                *l = (v / total).max(f64::MIN_POSITIVE).ln();
            }
        }
    }

    let mut out = DenoiserOutput::from_logits(logits);
    out.degenerate = degenerate;
    Ok(out)
}
