//! The model `p_{1|t}(x1 | x_t)`: an exact brute-force posterior for
//! enumerable targets, and a small trainable bidirectional denoiser.

pub mod checkpoint;
pub mod model;
pub mod oracle;

pub use model::{ModelConfig, TrainableDenoiser};
pub use oracle::oracle_posterior;

use crate::schedule::softmax;

/// Per-position categorical logits over the vocabulary predicting the clean
/// sequence, plus the intermediate features used by caching and retrieval.
#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    /// `D x K`, position-major. Row `i` predicts `x1^i` (shift convention is
    /// internal to the producing model).
    pub logits: Vec<Vec<f64>>,
    /// Per-layer `D x H` hidden states (block outputs). Empty for oracles.
    pub hidden_features: Vec<Vec<Vec<f64>>>,
    /// Per-layer `D x H` value features (pre-attention). Empty for oracles.
    pub value_features: Vec<Vec<Vec<f64>>>,
    /// Final normalized hidden states (`D x H`), source of retrieval features.
    pub final_hidden: Vec<Vec<f64>>,
    /// Set when a zero-likelihood posterior fell back to uniform.
    pub degenerate: bool,
}

impl DenoiserOutput {
    pub fn from_logits(logits: Vec<Vec<f64>>) -> Self {
        Self {
            logits,
            hidden_features: Vec::new(),
            value_features: Vec::new(),
            final_hidden: Vec::new(),
            degenerate: false,
        }
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    /// Normalized probability row for position `i`.
    pub fn probs(&self, i: usize) -> Vec<f64> {
        softmax(&self.logits[i])
    }

    pub fn argmax(&self, i: usize) -> usize {
        self.logits[i]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(idx, _)| idx)
            .unwrap()
    }
}
