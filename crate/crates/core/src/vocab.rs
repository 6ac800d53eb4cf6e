//! Vocabularies, token sequences, and segment labels.

use crate::error::{Error, Result};
use crate::rng;
use rand::RngCore;

pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Role of a sequence position.
///
/// `Pad` marks structural filler (frozen, never trained); PAD *token values*
/// inside a `Response` span are ordinary trainable targets used by
/// dynamic-length block generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Segment {
    Instruction,
    Response,
    Pad,
}

/// A finite token vocabulary with unit-norm embeddings and the special
/// token ids used by the sampler and corpus builders.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    size: usize,
    embed_dim: usize,
    /// Row-major `size x embed_dim`, every row unit-norm.
    embeddings: Vec<f64>,
    pad: usize,
    eos: usize,
}

impl Vocabulary {
    /// Build from explicit embedding rows. Rows must be unit-norm within 1e-6.
    pub fn from_embeddings(
        embeddings: Vec<Vec<f64>>,
        pad: usize,
        eos: usize,
    ) -> Result<Self> {
        let size = embeddings.len();
        if size < 2 {
            return Err(Error::Domain(format!("vocabulary needs K >= 2, got {size}")));
        }
        if pad == eos || pad >= size || eos >= size {
            return Err(Error::Domain(format!(
                "special tokens must be distinct and < K: pad={pad} eos={eos} K={size}"
            )));
        }
        let embed_dim = embeddings[0].len();
        let mut flat = Vec::with_capacity(size * embed_dim);
        for (i, row) in embeddings.iter().enumerate() {
            if row.len() != embed_dim {
                return Err(Error::Shape(format!(
                    "embedding row {i} has dim {}, expected {embed_dim}",
                    row.len()
                )));
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Domain(format!(
                    "embedding row {i} has norm {norm}, expected 1 +/- {UNIT_NORM_TOL}"
                )));
            }
            flat.extend_from_slice(row);
        }
        Ok(Self { size, embed_dim, embeddings: flat, pad, eos })
    }

    /// Seeded random unit vectors; the standard toy-text construction.
    pub fn random(size: usize, embed_dim: usize, seed: u64, pad: usize, eos: usize) -> Result<Self> {
        if embed_dim == 0 {
            return Err(Error::Domain("embedding dim must be positive".into()));
        }
        let mut r = rng::stream(seed, "vocab-embeddings");
        let mut rows = Vec::with_capacity(size);
        for _ in 0..size {
            let mut v: Vec<f64> = (0..embed_dim).map(|_| rng::gauss(&mut r)).collect();
            let mut norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-12 {
                v[0] = 1.0;
                norm = 1.0;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            rows.push(v);
        }
        Self::from_embeddings(rows, pad, eos)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    pub fn eos(&self) -> usize {
        self.eos
    }

    pub fn embedding(&self, token: usize) -> &[f64] {
        &self.embeddings[token * self.embed_dim..(token + 1) * self.embed_dim]
    }

    /// Precompute the cosine distance matrix `d[i][j] = 1 - <e_i, e_j>`.
    pub fn cosine_distances(&self) -> DistanceMatrix {
        let k = self.size;
        let mut d = vec![0.0; k * k];
        for i in 0..k {
            for j in (i + 1)..k {
                let ei = self.embedding(i);
                let ej = self.embedding(j);
                let dot: f64 = ei.iter().zip(ej).map(|(a, b)| a * b).sum();
                let dist = (1.0 - dot).clamp(0.0, 2.0);
                d[i * k + j] = dist;
                d[j * k + i] = dist;
            }
        }
        DistanceMatrix { k, d }
    }
}

/// Symmetric token distance matrix with zero diagonal, entries in `[0, 2]`.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    k: usize,
    d: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let k = rows.len();
        let mut d = vec![0.0; k * k];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Shape("distance matrix must be square".into()));
            }
            for (j, &v) in row.iter().enumerate() {
                if !(0.0..=2.0).contains(&v) {
                    return Err(Error::Domain(format!("distance [{i}][{j}]={v} outside [0,2]")));
                }
                d[i * k + j] = v;
            }
        }
        for i in 0..k {
            if d[i * k + i] != 0.0 {
                return Err(Error::Domain(format!("distance [{i}][{i}] must be 0")));
            }
            for j in 0..k {
                if (d[i * k + j] - d[j * k + i]).abs() > 1e-12 {
                    return Err(Error::Domain("distance matrix must be symmetric".into()));
                }
            }
        }
        Ok(Self { k, d })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.k + j]
    }
}

/// A fixed-length row of token indices with per-position segment labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    tokens: Vec<usize>,
    segments: Vec<Segment>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, segments: Vec<Segment>, vocab: &Vocabulary) -> Result<Self> {
        if tokens.len() != segments.len() {
            return Err(Error::Shape(format!(
                "tokens ({}) and segments ({}) length mismatch",
                tokens.len(),
                segments.len()
            )));
        }
        for (i, &t) in tokens.iter().enumerate() {
            if t >= vocab.size() {
                return Err(Error::Domain(format!("token {t} at position {i} >= K={}", vocab.size())));
            }
            if segments[i] == Segment::Pad && t != vocab.pad() {
                return Err(Error::Domain(format!(
                    "pad position {i} carries token {t}, expected PAD={}",
                    vocab.pad()
                )));
            }
        }
        Ok(Self { tokens, segments })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn token(&self, i: usize) -> usize {
        self.tokens[i]
    }

    pub fn segment(&self, i: usize) -> Segment {
        self.segments[i]
    }

    /// Free coordinates: positions the sampler may modify.
    pub fn is_free(&self, i: usize) -> bool {
        self.segments[i] == Segment::Response
    }

    pub fn response_positions(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| self.segments[i] == Segment::Response)
    }

    pub fn instruction_positions(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| self.segments[i] == Segment::Instruction)
    }

    /// Internal constructor for sequences produced by trusted code paths.
    pub(crate) fn from_parts_unchecked(tokens: Vec<usize>, segments: Vec<Segment>) -> Self {
        debug_assert_eq!(tokens.len(), segments.len());
        Self { tokens, segments }
    }

    pub(crate) fn set_token(&mut self, i: usize, token: usize) {
        self.tokens[i] = token;
    }
}

/// Convenience: instruction prefix followed by a response span.
pub fn concat_instruction_response(
    instruction: &[usize],
    response: &[usize],
    vocab: &Vocabulary,
) -> Result<TokenSequence> {
    let mut tokens = Vec::with_capacity(instruction.len() + response.len());
    let mut segments = Vec::with_capacity(tokens.capacity());
    tokens.extend_from_slice(instruction);
    segments.extend(std::iter::repeat(Segment::Instruction).take(instruction.len()));
    tokens.extend_from_slice(response);
    segments.extend(std::iter::repeat(Segment::Response).take(response.len()));
    TokenSequence::new(tokens, segments, vocab)
}

/// Draw a fresh response region from a per-coordinate weight row sampler.
pub fn random_response<R: RngCore>(len: usize, weights: &[f64], rng: &mut R) -> Vec<usize> {
    (0..len).map(|_| rng::sample_weighted(rng, weights)).collect()
}
