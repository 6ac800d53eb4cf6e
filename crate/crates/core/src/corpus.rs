//! Synthetic corpora with closed-form conditional response distributions.
//!
//! Every generator is seeded and enumerable: the exact target distribution
//! `q` over full sequences is available for oracle posteriors, TV checks,
//! and sampler convergence tests.

use crate::dist::SparseSeqDist;
use crate::error::{Error, Result};
use crate::mcq::{self, ToyModality, ToyModalityConfig};
use crate::rng;
use crate::training::TrainExample;
use crate::vocab::{Segment, TokenSequence, Vocabulary};
use serde::{Deserialize, Serialize};

/// Text token layout: specials then content ids.
pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const COND_DROP: usize = 2;
pub const FIRST_CONTENT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextCorpusKind {
    /// Response repeats the instruction verbatim.
    Copy,
    /// One fixed response for one fixed instruction (q is a delta).
    Constant,
    /// `num_responses` distinct equiprobable responses for one instruction.
    Pattern,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TextCorpusSpec {
    pub kind: TextCorpusKind,
    /// Vocabulary size K (>= 4: three specials plus content).
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub embedding_seed: u64,
    pub instruction_len: usize,
    /// Response length including the trailing EOS when `append_eos`.
    pub response_len: usize,
    pub num_responses: usize,
    pub examples: usize,
    pub append_eos: bool,
    /// Pad responses with PAD tokens up to a multiple of this block size
    /// (dynamic-length training data).
    pub pad_to_multiple: Option<usize>,
}

impl Default for TextCorpusSpec {
    fn default() -> Self {
        Self {
            kind: TextCorpusKind::Pattern,
            vocab_size: 6,
            embed_dim: 8,
            embedding_seed: 7,
            instruction_len: 1,
            response_len: 6,
            num_responses: 8,
            examples: 512,
            append_eos: false,
            pad_to_multiple: None,
        }
    }
}

/// A generated corpus plus its exact target distribution (when the
/// instruction is fixed and the response set enumerable).
#[derive(Debug, Clone)]
pub struct TextCorpus {
    pub vocab: Vocabulary,
    pub examples: Vec<TrainExample>,
    pub instruction: Vec<usize>,
    /// Distribution over full sequences (instruction + padded response).
    pub q: Option<SparseSeqDist>,
    /// The distinct padded responses backing `q`.
    pub responses: Vec<Vec<usize>>,
}

impl TextCorpus {
    /// Padded response length (positions after the instruction).
    pub fn response_span(&self) -> usize {
        self.responses.first().map(|r| r.len()).unwrap_or(0)
    }
}

fn content_token(spec: &TextCorpusSpec, r: &mut impl rand::RngCore) -> usize {
    let content = spec.vocab_size - FIRST_CONTENT;
    FIRST_CONTENT + (rng::uniform_f64(r) * content as f64) as usize % content
}

fn pad_response(mut resp: Vec<usize>, spec: &TextCorpusSpec) -> Vec<usize> {
    if let Some(block) = spec.pad_to_multiple {
        let target = resp.len().div_ceil(block) * block;
        resp.resize(target, PAD);
    }
    resp
}

/// Build a seeded text corpus with a closed-form response distribution.
pub fn make_text_corpus(spec: &TextCorpusSpec, seed: u64) -> Result<TextCorpus> {
    if spec.vocab_size < FIRST_CONTENT + 1 {
        return Err(Error::Config(format!(
            "vocab_size must be at least {} (specials + content)",
            FIRST_CONTENT + 1
        )));
    }
    if spec.response_len == 0 || spec.instruction_len == 0 {
        return Err(Error::Config("instruction and response must be nonempty".into()));
    }
    let vocab = Vocabulary::random(spec.vocab_size, spec.embed_dim, spec.embedding_seed, PAD, EOS)?;
    let mut r = rng::stream(seed, "corpus");

    let make_response_body = |r: &mut rand_chacha::ChaCha8Rng, spec: &TextCorpusSpec| -> Vec<usize> {
        let body_len = if spec.append_eos { spec.response_len - 1 } else { spec.response_len };
        let mut body: Vec<usize> = (0..body_len).map(|_| content_token(spec, r)).collect();
        if spec.append_eos {
            body.push(EOS);
        }
        body
    };

    match spec.kind {
        TextCorpusKind::Copy => {
            // Per-example random instruction; response echoes it.
            let mut examples = Vec::with_capacity(spec.examples);
            for _ in 0..spec.examples {
                let instr: Vec<usize> =
                    (0..spec.instruction_len).map(|_| content_token(spec, &mut r)).collect();
                let resp = pad_response(instr.clone(), spec);
                let x1 = assemble(&instr, &resp, &vocab)?;
                examples.push(TrainExample { x1, modality: "text".into(), signal: None });
            }
            Ok(TextCorpus { vocab, examples, instruction: Vec::new(), q: None, responses: Vec::new() })
        }
        TextCorpusKind::Constant | TextCorpusKind::Pattern => {
            let instruction: Vec<usize> =
                (0..spec.instruction_len).map(|_| content_token(spec, &mut r)).collect();
            let count = match spec.kind {
                TextCorpusKind::Constant => 1,
                _ => spec.num_responses.max(1),
            };
            let mut responses: Vec<Vec<usize>> = Vec::with_capacity(count);
            let mut guard = 0;
            while responses.len() < count {
                let body = pad_response(make_response_body(&mut r, spec), spec);
                if !responses.contains(&body) {
                    responses.push(body);
                }
                guard += 1;
                if guard > 100 * count {
                    return Err(Error::Config(format!(
                        "could not draw {count} distinct responses; vocabulary too small"
                    )));
                }
            }
            let mut support = Vec::with_capacity(count);
            for resp in &responses {
                let mut full = instruction.clone();
                full.extend(resp);
                support.push(full);
            }
            let q = SparseSeqDist::uniform(support)?;
            let mut examples = Vec::with_capacity(spec.examples);
            for _ in 0..spec.examples {
                let pick = (rng::uniform_f64(&mut r) * count as f64) as usize % count;
                let x1 = assemble(&instruction, &responses[pick], &vocab)?;
                examples.push(TrainExample { x1, modality: "text".into(), signal: None });
            }
            Ok(TextCorpus { vocab, examples, instruction, q: Some(q), responses })
        }
    }
}

/// Instruction prefix + response span; PAD tokens inside the response stay
/// Response-segment (trainable targets for dynamic-length generation).
fn assemble(instruction: &[usize], response: &[usize], vocab: &Vocabulary) -> Result<TokenSequence> {
    let mut tokens = Vec::with_capacity(instruction.len() + response.len());
    let mut segments = Vec::with_capacity(tokens.capacity());
    tokens.extend_from_slice(instruction);
    segments.extend(std::iter::repeat(Segment::Instruction).take(instruction.len()));
    tokens.extend_from_slice(response);
    segments.extend(std::iter::repeat(Segment::Response).take(response.len()));
    TokenSequence::new(tokens, segments, vocab)
}

// ---------------------------------------------------------------------------
// paired retrieval corpus
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PairedCorpusSpec {
    pub classes: usize,
    pub pairs: usize,
    /// Text tokens per item before the EOS.
    pub text_len: usize,
    pub embed_dim: usize,
    pub mixture_spread: f64,
    pub quantizer: ToyModalityConfig,
}

impl Default for PairedCorpusSpec {
    fn default() -> Self {
        Self {
            classes: 8,
            pairs: 100,
            text_len: 3,
            embed_dim: 8,
            mixture_spread: 0.15,
            quantizer: ToyModalityConfig { steps: 600, ..Default::default() },
        }
    }
}

/// Paired (text-tokens, signal-tokens) items over one joint vocabulary.
///
/// Token layout: specials, then one class token per class, then the
/// quantizer's flat code tokens.
#[derive(Debug, Clone)]
pub struct PairedCorpus {
    pub vocab: Vocabulary,
    pub modality: ToyModality,
    pub classes: usize,
    /// Per pair: class label, text item, signal item (both EOS-terminated).
    pub labels: Vec<usize>,
    pub text_items: Vec<Vec<usize>>,
    pub signal_items: Vec<Vec<usize>>,
}

impl PairedCorpus {
    pub fn class_token(&self, class: usize) -> usize {
        FIRST_CONTENT + class
    }

    fn code_token_offset(&self) -> usize {
        FIRST_CONTENT + self.classes
    }

    /// Remap a quantizer flat token into the joint vocabulary.
    pub fn signal_token(&self, quantizer_token: usize) -> usize {
        self.code_token_offset() + (quantizer_token - mcq::SPECIAL_TOKENS)
    }

    /// Training sequences: instruction = text item, response = signal item.
    pub fn train_examples(&self, vocab: &Vocabulary) -> Result<Vec<TrainExample>> {
        let mut out = Vec::with_capacity(self.labels.len());
        for (text, signal) in self.text_items.iter().zip(&self.signal_items) {
            let x1 = assemble(text, signal, vocab)?;
            out.push(TrainExample { x1, modality: "signal".into(), signal: None });
        }
        Ok(out)
    }

    /// Sequence view of one item for feature extraction (all Response).
    pub fn item_sequence(&self, tokens: &[usize]) -> Result<TokenSequence> {
        TokenSequence::new(tokens.to_vec(), vec![Segment::Response; tokens.len()], &self.vocab)
    }
}

/// Build the paired corpus: fit the toy quantizer on a Gaussian-mixture
/// point cloud, then emit (class text, quantized signal) pairs with known
/// ground-truth pairing.
pub fn make_paired_retrieval_corpus(spec: &PairedCorpusSpec, seed: u64) -> Result<PairedCorpus> {
    if spec.classes == 0 || spec.pairs == 0 {
        return Err(Error::Config("classes and pairs must be positive".into()));
    }
    let per_component = (spec.pairs * 2).div_ceil(spec.classes).max(8);
    let cloud = mcq::gaussian_mixture_corpus(
        spec.classes,
        per_component,
        spec.mixture_spread,
        rng::derive(seed, "paired-cloud"),
    );
    let points: Vec<[f64; 2]> = cloud.iter().map(|(p, _)| *p).collect();
    let modality = mcq::fit_toy_modality(&points, spec.quantizer.clone(), rng::derive(seed, "paired-fit"))?;

    let vocab_size = FIRST_CONTENT + spec.classes + (modality.codebook.flat_vocab_size() - mcq::SPECIAL_TOKENS);
    let vocab = Vocabulary::random(vocab_size, spec.embed_dim, rng::derive(seed, "paired-vocab"), PAD, EOS)?;

    let mut corpus = PairedCorpus {
        vocab,
        modality,
        classes: spec.classes,
        labels: Vec::new(),
        text_items: Vec::new(),
        signal_items: Vec::new(),
    };
    let mut r = rng::stream(seed, "paired-items");
    // Balanced classes +/- 1.
    for i in 0..spec.pairs {
        let class = i % spec.classes;
        let (point, _) = cloud
            .iter()
            .filter(|(_, c)| *c == class)
            .nth((rng::uniform_f64(&mut r) * per_component as f64) as usize % per_component)
            .expect("class bucket populated");
        let mut text = vec![corpus.class_token(class); spec.text_len];
        text.push(EOS);
        let code_tokens = corpus.modality.encode_point_tokens(point)?;
        let mut signal: Vec<usize> = code_tokens.iter().map(|&t| corpus.signal_token(t)).collect();
        signal.push(EOS);
        corpus.labels.push(class);
        corpus.text_items.push(text);
        corpus.signal_items.push(signal);
    }
    Ok(corpus)
}
