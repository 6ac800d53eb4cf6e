//! Euler solver for the denoising CTMC, classifier-free guidance, and
//! dynamic-length block generation.
//!
//! One solver step from `t` to `t + h`, per free coordinate `i`:
//! 1. sample a clean token `x1_i` from the denoiser's row `i`;
//! 2. compute the total exit rate `lambda_i` via the jump law;
//! 3. draw `Z_i ~ U[0,1]`;
//! 4. if `Z_i <= 1 - exp(-h lambda_i)`, resample the coordinate from the
//!    normalized jump target distribution, else keep it.
//!
//! Instruction and pad coordinates are never modified. When `t + h` reaches 1
//! the step instead writes the sampled (or argmax) clean token directly,
//! which sidesteps the divergent `beta` at `t = 1`.
//!
//! Every coordinate draws from its own counter-based stream keyed by
//! `(seed, step, coordinate)`, so updates are order-independent and a fixed
//! seed reproduces a generation exactly.

use crate::denoiser::DenoiserOutput;
use crate::error::{Error, Result};
use crate::rng;
use crate::schedule::{softmax, PathSchedule};
use crate::velocity;
use crate::vocab::{Segment, TokenSequence, Vocabulary};
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// What the solver does on the step that lands on `t = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalStepPolicy {
    SampleX1,
    ArgmaxX1,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Step count N over the uniform grid {0, h, ..., 1}, h = 1/N.
    pub steps: usize,
    /// CFG scale; 1 disables the second (condition-dropped) forward.
    pub guidance_scale: f64,
    /// Response block size B for dynamic-length generation.
    pub block_size: usize,
    pub max_blocks: usize,
    /// EOS confidence threshold for block extension.
    pub eos_threshold: f64,
    pub final_step: FinalStepPolicy,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 64,
            guidance_scale: 1.0,
            block_size: 64,
            max_blocks: 4,
            eos_threshold: 0.5,
            final_step: FinalStepPolicy::SampleX1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.block_size == 0 || self.max_blocks == 0 {
            return Err(Error::Config("block_size and max_blocks must be >= 1".into()));
        }
        if !(self.eos_threshold > 0.0 && self.eos_threshold < 1.0) {
            return Err(Error::Config("eos_threshold must lie in (0, 1)".into()));
        }
        if self.guidance_scale < 0.0 {
            return Err(Error::Config("guidance_scale must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-step record for traces and benchmarks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub t: f64,
    pub jumps: usize,
    pub ms: f64,
    pub recomputed: usize,
    pub reused: usize,
}

/// Full record of one generation.
#[derive(Debug, Clone, Default)]
pub struct GenerationTrace {
    pub steps: Vec<StepStats>,
    /// Sequence after each executed step.
    pub sequences: Vec<Vec<usize>>,
    /// Dynamic-length bookkeeping.
    pub settled_blocks: usize,
    pub truncated: bool,
}

impl GenerationTrace {
    pub fn total_ms(&self) -> f64 {
        self.steps.iter().map(|s| s.ms).sum()
    }

    pub fn total_jumps(&self) -> usize {
        self.steps.iter().map(|s| s.jumps).sum()
    }
}

/// A denoiser the sampler can query: the exact oracle, the trainable model,
/// or the cache-gated model.
pub trait Predictor {
    fn predict(&mut self, x: &TokenSequence, t: f64, condition_dropped: bool) -> Result<DenoiserOutput>;

    /// (recomputed, reused) response-position counters for the last call,
    /// when the predictor runs a feature cache.
    fn last_cache_stats(&self) -> Option<(usize, usize)> {
        None
    }

    /// Called when the sequence layout changes (dynamic-length growth).
    fn reset_session(&mut self) {}
}

/// Brute-force Bayes posterior as the denoiser.
pub struct OraclePredictor<'a> {
    pub q: &'a crate::dist::SparseSeqDist,
    pub schedule: &'a PathSchedule,
    pub vocab: &'a Vocabulary,
    pub cap: usize,
}

impl Predictor for OraclePredictor<'_> {
    fn predict(&mut self, x: &TokenSequence, t: f64, _condition_dropped: bool) -> Result<DenoiserOutput> {
        crate::denoiser::oracle_posterior(self.q, self.schedule, self.vocab, x, t, self.cap)
    }
}

/// Plain uncached trainable model.
pub struct ModelPredictor<'a> {
    pub model: &'a crate::denoiser::TrainableDenoiser,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&mut self, x: &TokenSequence, t: f64, condition_dropped: bool) -> Result<DenoiserOutput> {
        self.model.forward(x, t, condition_dropped)
    }
}

/// Rowwise `uncond + s * (cond - uncond)`.
pub fn cfg_combine(cond: &[Vec<f64>], uncond: &[Vec<f64>], s: f64) -> Result<Vec<Vec<f64>>> {
    if cond.len() != uncond.len() {
        return Err(Error::Shape("cfg_combine row count mismatch".into()));
    }
    cond.iter()
        .zip(uncond)
        .map(|(c, u)| {
            if c.len() != u.len() {
                return Err(Error::Shape("cfg_combine row width mismatch".into()));
            }
            Ok(c.iter().zip(u).map(|(&cv, &uv)| uv + s * (cv - uv)).collect())
        })
        .collect()
}

/// One Euler step. Returns the updated sequence and the jump count.
pub fn euler_step(
    x_t: &TokenSequence,
    t: f64,
    h: f64,
    output: &DenoiserOutput,
    schedule: &PathSchedule,
    vocab: &Vocabulary,
    config: &SamplerConfig,
    seed: u64,
    step_index: usize,
) -> Result<(TokenSequence, usize)> {
    if output.len() != x_t.len() {
        return Err(Error::Shape(format!(
            "denoiser output rows {} misaligned with sequence length {}",
            output.len(),
            x_t.len()
        )));
    }
    if t + h > 1.0 + 1e-12 {
        return Err(Error::Domain(format!("step {t} + {h} exceeds 1")));
    }
    let mut next = x_t.clone();
    let mut jumps = 0;
    let final_step = t + h >= 1.0 - 1e-12;

    if schedule.is_metric() {
        for i in 0..x_t.len() {
            if !x_t.is_free(i) {
                continue;
            }
            let mut stream = rng::coord_stream(seed, step_index as u64, i as u64);
            let probs = softmax(&output.logits[i]);
            let x1 = rng::sample_weighted(&mut stream, &probs);
            if final_step {
                let value = match config.final_step {
                    FinalStepPolicy::SampleX1 => x1,
                    FinalStepPolicy::ArgmaxX1 => output.argmax(i),
                };
                if value != x_t.token(i) {
                    jumps += 1;
                }
                next.set_token(i, value);
                continue;
            }
            let law = velocity::jump_law(schedule, vocab, x_t.token(i), x1, t)?;
            if law.total_rate <= 0.0 {
                continue;
            }
            let z = rng::uniform_f64(&mut stream);
            let jump_prob = 1.0 - (-h * law.total_rate).exp();
            if z <= jump_prob {
                let dest = rng::sample_weighted(&mut stream, &law.target);
                next.set_token(i, dest);
                jumps += 1;
            }
        }
    } else {
        // Mixture fallback (non-kinetic): the paper gives no velocity for
        // mixture paths, so resample mismatched coordinates directly from the
        // sampled x1, at most ceil(D_free * h) per step.
        let free: Vec<usize> = (0..x_t.len()).filter(|&i| x_t.is_free(i)).collect();
        if final_step {
            for &i in &free {
                let mut stream = rng::coord_stream(seed, step_index as u64, i as u64);
                let probs = softmax(&output.logits[i]);
                let x1 = rng::sample_weighted(&mut stream, &probs);
                let value = match config.final_step {
                    FinalStepPolicy::SampleX1 => x1,
                    FinalStepPolicy::ArgmaxX1 => output.argmax(i),
                };
                if value != x_t.token(i) {
                    jumps += 1;
                }
                next.set_token(i, value);
            }
        } else {
            let budget = ((free.len() as f64) * h).ceil() as usize;
            let mut mismatched: Vec<(usize, usize)> = Vec::new();
            for &i in &free {
                let mut stream = rng::coord_stream(seed, step_index as u64, i as u64);
                let probs = softmax(&output.logits[i]);
                let x1 = rng::sample_weighted(&mut stream, &probs);
                if x1 != x_t.token(i) {
                    mismatched.push((i, x1));
                }
            }
            // Budgeted selection from a step-level stream (coordinate streams
            // cannot coordinate a global choice).
            let mut step_stream = rng::coord_stream(seed, step_index as u64, u64::MAX);
            while mismatched.len() > budget {
                let drop = (rng::uniform_f64(&mut step_stream) * mismatched.len() as f64) as usize;
                mismatched.swap_remove(drop.min(mismatched.len() - 1));
            }
            for (i, x1) in mismatched {
                next.set_token(i, x1);
                jumps += 1;
            }
        }
    }
    Ok((next, jumps))
}

fn denoise_once(
    predictor: &mut dyn Predictor,
    x: &TokenSequence,
    t: f64,
    config: &SamplerConfig,
) -> Result<DenoiserOutput> {
    if (config.guidance_scale - 1.0).abs() < 1e-15 {
        return predictor.predict(x, t, false);
    }
    let cond = predictor.predict(x, t, false)?;
    let uncond = predictor.predict(x, t, true)?;
    let logits = cfg_combine(&cond.logits, &uncond.logits, config.guidance_scale)?;
    let mut out = cond;
    out.logits = logits;
    Ok(out)
}

/// Initialize the response span from the path's source distribution (t = 0).
pub fn init_response_region(
    instruction: &TokenSequence,
    response_len: usize,
    schedule: &PathSchedule,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<TokenSequence> {
    if instruction.instruction_positions().count() == 0 {
        return Err(Error::Precondition("instruction segment is empty".into()));
    }
    let source = schedule.source_row(vocab);
    let mut stream = rng::stream(seed, "response-init");
    let mut tokens = instruction.tokens().to_vec();
    let mut segments = instruction.segments().to_vec();
    for _ in 0..response_len {
        tokens.push(rng::sample_weighted(&mut stream, &source));
        segments.push(Segment::Response);
    }
    TokenSequence::new(tokens, segments, vocab)
}

/// Run the full N-step Euler solve over `[0, 1]` on a prepared sequence.
pub fn denoise(
    predictor: &mut dyn Predictor,
    mut x: TokenSequence,
    config: &SamplerConfig,
    schedule: &PathSchedule,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<(TokenSequence, GenerationTrace)> {
    config.validate()?;
    let n = config.steps;
    let h = 1.0 / n as f64;
    let mut trace = GenerationTrace::default();
    for step in 0..n {
        let t = step as f64 * h;
        let started = Instant::now();
        let output = denoise_once(predictor, &x, t, config)?;
        let (next, jumps) = euler_step(&x, t, h, &output, schedule, vocab, config, seed, step)?;
        let ms = started.elapsed().as_secs_f64() * 1000.0;
        let (recomputed, reused) = predictor.last_cache_stats().unwrap_or((0, 0));
        x = next;
        trace.steps.push(StepStats { step, t, jumps, ms, recomputed, reused });
        trace.sequences.push(x.tokens().to_vec());
    }
    Ok((x, trace))
}

/// Fixed-length generation: initialize the response from the source
/// distribution and run the solver.
pub fn generate(
    predictor: &mut dyn Predictor,
    instruction: &TokenSequence,
    response_len: usize,
    config: &SamplerConfig,
    schedule: &PathSchedule,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<(TokenSequence, GenerationTrace)> {
    let x0 = init_response_region(instruction, response_len, schedule, vocab, seed)?;
    denoise(predictor, x0, config, schedule, vocab, seed)
}

/// Dynamic-length generation: grow the response in blocks of `B` until the
/// EOS-confidence probe clears the threshold, then run the full solve at the
/// settled length. Tokens after the first emitted EOS are rewritten to PAD.
pub fn dynamic_length_generate(
    predictor: &mut dyn Predictor,
    instruction: &TokenSequence,
    config: &SamplerConfig,
    schedule: &PathSchedule,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<(TokenSequence, GenerationTrace)> {
    config.validate()?;
    if instruction.instruction_positions().count() == 0 {
        return Err(Error::Precondition("instruction segment is empty".into()));
    }
    let b = config.block_size;
    let t_probe = 1.0 - 1.0 / config.steps as f64;
    let source = schedule.source_row(vocab);

    let mut tokens = instruction.tokens().to_vec();
    let mut segments = instruction.segments().to_vec();
    let mut blocks = 0usize;
    let mut truncated = false;
    loop {
        // Append one freshly initialized block.
        let mut block_stream = rng::stream(seed, &format!("dyn-block-{blocks}"));
        for _ in 0..b {
            tokens.push(rng::sample_weighted(&mut block_stream, &source));
            segments.push(Segment::Response);
        }
        blocks += 1;
        let probe_seq = TokenSequence::new(tokens.clone(), segments.clone(), vocab)?;
        predictor.reset_session();
        let probe = denoise_once(predictor, &probe_seq, t_probe, config)?;
        let final_block_start = probe_seq.len() - b;
        let max_eos_prob = (final_block_start..probe_seq.len())
            .map(|i| probe.probs(i)[vocab.eos()])
            .fold(0.0, f64::max);
        if max_eos_prob >= config.eos_threshold {
            break;
        }
        if blocks >= config.max_blocks {
            truncated = true;
            break;
        }
    }

    predictor.reset_session();
    let x0 = TokenSequence::new(tokens, segments, vocab)?;
    let (mut out, mut trace) = denoise(predictor, x0, config, schedule, vocab, seed)?;
    trace.settled_blocks = blocks;
    trace.truncated = truncated;

    // Rewrite everything after the first emitted EOS to PAD.
    let response_start = instruction.len();
    if let Some(eos_pos) =
        (response_start..out.len()).find(|&i| out.token(i) == vocab.eos())
    {
        for i in (eos_pos + 1)..out.len() {
            out.set_token(i, vocab.pad());
        }
    }
    Ok((out, trace))
}

/// JSON-lines trace writer: one record per step.
pub fn write_trace_jsonl(trace: &GenerationTrace, mut w: impl std::io::Write) -> Result<()> {
    for s in &trace.steps {
        let line = serde_json::to_string(s)?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::SparseSeqDist;
    use crate::schedule::{BaseDistribution, KappaSchedule};

    fn vocab() -> Vocabulary {
        Vocabulary::random(5, 6, 13, 0, 1).unwrap()
    }

    fn metric(v: &Vocabulary) -> PathSchedule {
        PathSchedule::metric(3.0, 0.9, v).unwrap()
    }

    fn instr(v: &Vocabulary) -> TokenSequence {
        TokenSequence::new(vec![2], vec![Segment::Instruction], v).unwrap()
    }

    #[test]
    fn cfg_combine_boundaries() {
        let cond = vec![vec![1.0, 0.0]];
        let uncond = vec![vec![0.0, 0.0]];
        assert_eq!(cfg_combine(&cond, &uncond, 1.0).unwrap(), cond);
        assert_eq!(cfg_combine(&cond, &uncond, 0.0).unwrap(), uncond);
        assert_eq!(cfg_combine(&cond, &uncond, 2.0).unwrap(), vec![vec![2.0, 0.0]]);
        assert!(cfg_combine(&cond, &[], 1.0).is_err());
        assert!(cfg_combine(&cond, &[vec![0.0]], 1.0).is_err());
    }

    #[test]
    fn jump_probability_matches_closed_form() {
        // lambda = 2, h = 0.1: P(jump) = 1 - exp(-0.2) ~ 0.1813, checked by
        // Monte Carlo over the same uniform draw the solver uses.
        let lambda = 2.0;
        let h = 0.1;
        let p_expect = 1.0 - (-h * lambda as f64).exp();
        let mut hits = 0u64;
        let n = 100_000u64;
        for i in 0..n {
            let mut stream = rng::coord_stream(77, i, 0);
            let z = rng::uniform_f64(&mut stream);
            if z <= p_expect {
                hits += 1;
            }
        }
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.18126924692201818).abs() < 0.005, "freq={freq}");
    }

    #[test]
    fn absorbing_coordinate_never_moves() {
        let v = vocab();
        let s = metric(&v);
        let q = SparseSeqDist::delta(vec![2, 3, 3]);
        let mut pred = OraclePredictor { q: &q, schedule: &s, vocab: &v, cap: 1000 };
        // x already equal to the target: identity logits give x1 = x, rate 0.
        let x = TokenSequence::new(
            vec![2, 3, 3],
            vec![Segment::Instruction, Segment::Response, Segment::Response],
            &v,
        )
        .unwrap();
        let out = pred.predict(&x, 0.5, false).unwrap();
        let cfg = SamplerConfig { steps: 4, ..Default::default() };
        let (next, jumps) = euler_step(&x, 0.25, 0.25, &out, &s, &v, &cfg, 5, 1).unwrap();
        assert_eq!(next.tokens(), x.tokens());
        assert_eq!(jumps, 0);
    }

    #[test]
    fn oracle_delta_generation_recovers_target() {
        let v = vocab();
        let s = metric(&v);
        let target = vec![2usize, 3, 4, 2, 3];
        let mut full = vec![2usize];
        full.extend(&target);
        let q = SparseSeqDist::delta(full);
        let mut pred = OraclePredictor { q: &q, schedule: &s, vocab: &v, cap: 1000 };
        let cfg = SamplerConfig { steps: 64, ..Default::default() };
        let (out, trace) = generate(&mut pred, &instr(&v), 5, &cfg, &s, &v, 99).unwrap();
        assert_eq!(&out.tokens()[1..], target.as_slice());
        assert_eq!(trace.steps.len(), 64);
    }

    #[test]
    fn one_step_grid_degenerates_to_final_policy() {
        let v = vocab();
        let s = metric(&v);
        let mut full = vec![2usize];
        full.extend([3, 3]);
        let q = SparseSeqDist::delta(full);
        let mut pred = OraclePredictor { q: &q, schedule: &s, vocab: &v, cap: 1000 };
        let cfg = SamplerConfig { steps: 1, ..Default::default() };
        let (out, trace) = generate(&mut pred, &instr(&v), 2, &cfg, &s, &v, 7).unwrap();
        assert_eq!(trace.steps.len(), 1);
        assert_eq!(&out.tokens()[1..], &[3, 3]);
    }

    #[test]
    fn frozen_segments_are_immutable_across_all_steps() {
        let v = vocab();
        let s = metric(&v);
        let q = SparseSeqDist::uniform(vec![
            vec![2, 0, 3, 4],
            vec![2, 0, 4, 3],
        ])
        .unwrap();
        let mut pred = OraclePredictor { q: &q, schedule: &s, vocab: &v, cap: 1000 };
        let x0 = TokenSequence::new(
            vec![2, 0, 3, 2],
            vec![Segment::Instruction, Segment::Pad, Segment::Response, Segment::Response],
            &v,
        )
        .unwrap();
        let cfg = SamplerConfig { steps: 16, ..Default::default() };
        let (out, trace) = denoise(&mut pred, x0.clone(), &cfg, &s, &v, 31).unwrap();
        assert_eq!(out.token(0), 2);
        assert_eq!(out.token(1), 0);
        for seq in &trace.sequences {
            assert_eq!(seq[0], 2);
            assert_eq!(seq[1], 0);
        }
    }

    #[test]
    fn determinism_same_seed_same_trace() {
        let v = vocab();
        let s = metric(&v);
        let q = SparseSeqDist::uniform(vec![vec![2, 3, 4], vec![2, 4, 3], vec![2, 2, 2], vec![2, 3, 3]])
            .unwrap();
        let cfg = SamplerConfig { steps: 32, ..Default::default() };
        let run = |seed: u64| {
            let mut pred = OraclePredictor { q: &q, schedule: &s, vocab: &v, cap: 1000 };
            generate(&mut pred, &instr(&v), 2, &cfg, &s, &v, seed).unwrap()
        };
        let (a, ta) = run(5);
        let (b, tb) = run(5);
        let (c, _) = run(6);
        assert_eq!(a.tokens(), b.tokens());
        assert_eq!(ta.sequences, tb.sequences);
        // Different seed should (with overwhelming probability) differ somewhere.
        let _ = c;
    }

    #[test]
    fn mixture_fallback_converges_to_delta() {
        let v = vocab();
        let s = PathSchedule::mixture(KappaSchedule::Linear, BaseDistribution::Uniform);
        let target = vec![3usize, 4, 2, 3];
        let mut full = vec![2usize];
        full.extend(&target);
        let q = SparseSeqDist::delta(full);
        let mut pred = OraclePredictor { q: &q, schedule: &s, vocab: &v, cap: 1000 };
        let cfg = SamplerConfig { steps: 32, ..Default::default() };
        let (out, _) = generate(&mut pred, &instr(&v), 4, &cfg, &s, &v, 17).unwrap();
        assert_eq!(&out.tokens()[1..], target.as_slice());
    }

    #[test]
    fn hamming_distance_to_delta_target_is_monotone_in_expectation() {
        let v = vocab();
        let s = metric(&v);
        let target = vec![3usize, 4, 2, 3, 4, 2];
        let mut full = vec![2usize];
        full.extend(&target);
        let q = SparseSeqDist::delta(full);
        let cfg = SamplerConfig { steps: 16, ..Default::default() };
        let runs = 1000;
        let mut mean_dist = vec![0.0f64; cfg.steps + 1];
        for seed in 0..runs {
            let mut pred = OraclePredictor { q: &q, schedule: &s, vocab: &v, cap: 1000 };
            let x0 = init_response_region(&instr(&v), 6, &s, &v, seed).unwrap();
            let hamming = |tokens: &[usize]| -> f64 {
                tokens[1..]
                    .iter()
                    .zip(&target)
                    .filter(|(a, b)| a != b)
                    .count() as f64
            };
            mean_dist[0] += hamming(x0.tokens());
            let (_, trace) = denoise(&mut pred, x0, &cfg, &s, &v, seed).unwrap();
            for (i, seq) in trace.sequences.iter().enumerate() {
                mean_dist[i + 1] += hamming(seq);
            }
        }
        mean_dist.iter_mut().for_each(|x| *x /= runs as f64);
        for w in mean_dist.windows(2) {
            // Allow a 1% noise band of the response length.
            assert!(w[1] <= w[0] + 0.06, "mean hamming rose: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn trace_jsonl_schema() {
        let trace = GenerationTrace {
            steps: vec![StepStats { step: 0, t: 0.0, jumps: 2, ms: 0.1, recomputed: 0, reused: 0 }],
            sequences: vec![vec![1, 2]],
            settled_blocks: 1,
            truncated: false,
        };
        let mut buf = Vec::new();
        write_trace_jsonl(&trace, &mut buf).unwrap();
        let line: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        assert_eq!(line["step"], 0);
        assert!(line["t"].is_number());
        assert_eq!(line["jumps"], 2);
        assert!(line["ms"].is_number());
    }
}
