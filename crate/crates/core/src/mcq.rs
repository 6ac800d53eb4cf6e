//! Multi-codebook vector quantization (MCQ) and the toy signal modality.
//!
//! An embedding of dimension E is split into M chunks, each quantized
//! against its own sub-codebook by Euclidean nearest neighbor (ties break to
//! the lowest index). The concatenated selected sub-vectors form the
//! representative vector, re-injected as a continuous input after a linear
//! projection. Codebooks learn by EMA (decay 0.99) with dead-code revival;
//! the encoder trains through the straight-through estimator.
//!
//! A quantized point becomes M consecutive tokens, slot m drawn from its own
//! id range after the special tokens, so one flat softmax vocabulary serves
//! the sequence model while sub-codebook identity stays recoverable.

use crate::error::{Error, Result};
use crate::rng;
use crate::vocab::Vocabulary;
use rand::RngCore;
use serde::{Deserialize, Serialize};

pub const SPECIAL_TOKENS: usize = 3; // PAD = 0, EOS = 1, condition-drop = 2
pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const COND_DROP: usize = 2;

const COMMITMENT_WEIGHT: f64 = 0.25;

/// One table of `k` code vectors of dimension `dim`.
#[derive(Debug, Clone)]
pub struct SubCodebook {
    pub k: usize,
    pub dim: usize,
    /// Row-major `k x dim`.
    pub vectors: Vec<f64>,
}

impl SubCodebook {
    pub fn vector(&self, idx: usize) -> &[f64] {
        &self.vectors[idx * self.dim..(idx + 1) * self.dim]
    }

    /// Exact nearest code by squared Euclidean distance, lowest index on ties.
    pub fn nearest(&self, chunk: &[f64]) -> (usize, f64) {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for i in 0..self.k {
            let v = self.vector(i);
            let d: f64 = chunk.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        (best, best_d)
    }
}

/// Ordered set of sub-codebooks over a full embedding of dimension `e`.
#[derive(Debug, Clone)]
pub struct Codebook {
    pub subs: Vec<SubCodebook>,
    pub e: usize,
}

impl Codebook {
    pub fn new(subs: Vec<SubCodebook>) -> Result<Self> {
        if subs.is_empty() {
            return Err(Error::Config("codebook needs at least one sub-codebook".into()));
        }
        let dim = subs[0].dim;
        if subs.iter().any(|s| s.dim != dim) {
            return Err(Error::Shape("sub-codebooks must share a chunk dimension".into()));
        }
        if subs.iter().any(|s| s.vectors.iter().any(|v| !v.is_finite())) {
            return Err(Error::Domain("codebook vectors must be finite".into()));
        }
        let e = dim * subs.len();
        Ok(Self { subs, e })
    }

    pub fn random(m: usize, k_m: usize, e: usize, seed: u64) -> Result<Self> {
        if m == 0 || e % m != 0 {
            return Err(Error::Config(format!("E={e} must be divisible by M={m}")));
        }
        let dim = e / m;
        let mut r = rng::stream(seed, "codebook-init");
        let subs = (0..m)
            .map(|_| SubCodebook {
                k: k_m,
                dim,
                vectors: (0..k_m * dim).map(|_| 0.5 * rng::gauss(&mut r)).collect(),
            })
            .collect();
        Self::new(subs)
    }

    pub fn m(&self) -> usize {
        self.subs.len()
    }

    pub fn chunk_dim(&self) -> usize {
        self.e / self.m()
    }

    /// Flat token-id range sizes: specials + sum of K_m.
    pub fn flat_vocab_size(&self) -> usize {
        SPECIAL_TOKENS + self.subs.iter().map(|s| s.k).sum::<usize>()
    }

    /// Flat token id for `(slot, index)`.
    pub fn flatten_index(&self, slot: usize, index: usize) -> usize {
        let offset: usize = self.subs[..slot].iter().map(|s| s.k).sum();
        SPECIAL_TOKENS + offset + index
    }

    /// Inverse of [`Codebook::flatten_index`]; `None` for specials or
    /// out-of-range ids.
    pub fn unflatten_token(&self, token: usize) -> Option<(usize, usize)> {
        if token < SPECIAL_TOKENS {
            return None;
        }
        let mut rel = token - SPECIAL_TOKENS;
        for (slot, sub) in self.subs.iter().enumerate() {
            if rel < sub.k {
                return Some((slot, rel));
            }
            rel -= sub.k;
        }
        None
    }
}

/// The result of quantizing one embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedCode {
    pub indices: Vec<usize>,
    pub representative: Vec<f64>,
}

/// Argmin quantization: chunk-wise nearest sub-code.
pub fn quantize(codebook: &Codebook, z: &[f64]) -> Result<QuantizedCode> {
    if z.len() != codebook.e {
        return Err(Error::Shape(format!(
            "input dim {} != codebook dim {}",
            z.len(),
            codebook.e
        )));
    }
    let dim = codebook.chunk_dim();
    let mut indices = Vec::with_capacity(codebook.m());
    let mut representative = Vec::with_capacity(codebook.e);
    for (m, sub) in codebook.subs.iter().enumerate() {
        let chunk = &z[m * dim..(m + 1) * dim];
        let (idx, _) = sub.nearest(chunk);
        indices.push(idx);
        representative.extend_from_slice(sub.vector(idx));
    }
    Ok(QuantizedCode { indices, representative })
}

/// Rebuild the representative vector from stored indices.
pub fn representative_lookup(codebook: &Codebook, indices: &[usize]) -> Result<Vec<f64>> {
    if indices.len() != codebook.m() {
        return Err(Error::Shape(format!(
            "index count {} != sub-codebook count {}",
            indices.len(),
            codebook.m()
        )));
    }
    let mut out = Vec::with_capacity(codebook.e);
    for (sub, &idx) in codebook.subs.iter().zip(indices) {
        if idx >= sub.k {
            return Err(Error::Domain(format!("index {idx} out of range for K_m={}", sub.k)));
        }
        out.extend_from_slice(sub.vector(idx));
    }
    Ok(out)
}

/// Lightweight projection into model width: a single `h x e` linear map.
#[derive(Debug, Clone)]
pub struct Projection {
    pub h: usize,
    pub e: usize,
    pub w: Vec<f64>,
}

impl Projection {
    pub fn random(h: usize, e: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "projection");
        Self { h, e, w: (0..h * e).map(|_| rng::gauss(&mut r) / (e as f64).sqrt()).collect() }
    }

    /// Identity on the first `min(e, h)` coordinates, zero elsewhere.
    pub fn identity_padded(h: usize, e: usize) -> Self {
        let mut w = vec![0.0; h * e];
        for i in 0..h.min(e) {
            w[i * e + i] = 1.0;
        }
        Self { h, e, w }
    }

    pub fn apply(&self, rep: &[f64]) -> Result<Vec<f64>> {
        if rep.len() != self.e {
            return Err(Error::Shape(format!(
                "representative dim {} != projection input {}",
                rep.len(),
                self.e
            )));
        }
        let mut out = vec![0.0; self.h];
        for (o, out_v) in out.iter_mut().enumerate() {
            let row = &self.w[o * self.e..(o + 1) * self.e];
            *out_v = row.iter().zip(rep).map(|(a, b)| a * b).sum();
        }
        Ok(out)
    }
}

/// `(codebook_loss, commitment_loss)`: the same squared distance with
/// opposite gradient-stop routing; numerically equal as scalars.
pub fn vq_losses(z: &[f64], code: &QuantizedCode) -> (f64, f64) {
    let d: f64 = z
        .iter()
        .zip(&code.representative)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    (d, d)
}

// ---------------------------------------------------------------------------
// toy modality: MLP encoder -> MCQ -> MLP decoder on 2D points
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Mlp {
    in_dim: usize,
    hidden: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

struct MlpTape {
    x: Vec<f64>,
    hpre: Vec<f64>,
    hact: Vec<f64>,
}

#[derive(Debug, Clone)]
struct MlpGrads {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl Mlp {
    fn new<R: RngCore>(in_dim: usize, hidden: usize, out_dim: usize, r: &mut R) -> Self {
        let s1 = 1.0 / (in_dim as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        Self {
            in_dim,
            hidden,
            w1: (0..hidden * in_dim).map(|_| s1 * rng::gauss(r)).collect(),
            b1: vec![0.0; hidden],
            w2: (0..out_dim * hidden).map(|_| s2 * rng::gauss(r)).collect(),
            b2: vec![0.0; out_dim],
        }
    }

    fn zeros_grads(&self) -> MlpGrads {
        MlpGrads {
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; self.b1.len()],
            w2: vec![0.0; self.w2.len()],
            b2: vec![0.0; self.b2.len()],
        }
    }

    fn forward(&self, x: &[f64]) -> (Vec<f64>, MlpTape) {
        let mut hpre = self.b1.clone();
        for (o, h) in hpre.iter_mut().enumerate() {
            let row = &self.w1[o * self.in_dim..(o + 1) * self.in_dim];
            *h += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        let hact: Vec<f64> = hpre.iter().map(|&v| v.tanh()).collect();
        let mut out = self.b2.clone();
        for (o, y) in out.iter_mut().enumerate() {
            let row = &self.w2[o * self.hidden..(o + 1) * self.hidden];
            *y += row.iter().zip(&hact).map(|(a, b)| a * b).sum::<f64>();
        }
        (out, MlpTape { x: x.to_vec(), hpre, hact })
    }

    fn backward(&self, tape: &MlpTape, dout: &[f64], g: &mut MlpGrads) -> Vec<f64> {
        let mut dhact = vec![0.0; self.hidden];
        for (o, &d) in dout.iter().enumerate() {
            g.b2[o] += d;
            let row = &self.w2[o * self.hidden..(o + 1) * self.hidden];
            let grow = &mut g.w2[o * self.hidden..(o + 1) * self.hidden];
            for i in 0..self.hidden {
                grow[i] += d * tape.hact[i];
                dhact[i] += d * row[i];
            }
        }
        let mut dx = vec![0.0; self.in_dim];
        for o in 0..self.hidden {
            let th = tape.hpre[o].tanh();
            let dpre = dhact[o] * (1.0 - th * th);
            g.b1[o] += dpre;
            let row = &self.w1[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut g.w1[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += dpre * tape.x[i];
                dx[i] += dpre * row[i];
            }
        }
        dx
    }

    fn sgd(&mut self, g: &MlpGrads, lr: f64) {
        for (w, d) in self.w1.iter_mut().zip(&g.w1) {
            *w -= lr * d;
        }
        for (w, d) in self.b1.iter_mut().zip(&g.b1) {
            *w -= lr * d;
        }
        for (w, d) in self.w2.iter_mut().zip(&g.w2) {
            *w -= lr * d;
        }
        for (w, d) in self.b2.iter_mut().zip(&g.b2) {
            *w -= lr * d;
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyModalityConfig {
    pub m: usize,
    pub k_m: usize,
    /// Full latent dimension E (divisible by M).
    pub code_dim: usize,
    pub hidden: usize,
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub ema_decay: f64,
    /// Steps without use before a code is re-seeded.
    pub revive_after: usize,
}

impl Default for ToyModalityConfig {
    fn default() -> Self {
        Self {
            m: 2,
            k_m: 16,
            code_dim: 8,
            hidden: 32,
            steps: 1500,
            batch: 64,
            learning_rate: 0.02,
            ema_decay: 0.99,
            revive_after: 100,
        }
    }
}

/// Per-step reconstruction statistics fed back into the DFM multi-loss.
#[derive(Debug, Clone, Copy)]
pub struct RecStepStats {
    pub rec_loss: f64,
    pub commitment_loss: f64,
    pub codebook_loss: f64,
    pub rec_grad_norm: f64,
    pub commit_grad_norm: f64,
}

/// Trained encoder/codebook/decoder for the synthetic 2D "signal" modality.
#[derive(Debug, Clone)]
pub struct ToyModality {
    pub cfg: ToyModalityConfig,
    encoder: Mlp,
    decoder: Mlp,
    pub codebook: Codebook,
    ema_count: Vec<Vec<f64>>,
    ema_sum: Vec<Vec<Vec<f64>>>,
    last_used: Vec<Vec<usize>>,
    step: usize,
    /// Recent encoder chunks, ring per sub-codebook, for dead-code revival.
    recent: Vec<Vec<Vec<f64>>>,
    revive_rng: rng::SplitMix64,
}

impl ToyModality {
    pub fn new(cfg: ToyModalityConfig, seed: u64) -> Result<Self> {
        if cfg.code_dim % cfg.m != 0 {
            return Err(Error::Config(format!(
                "code_dim {} not divisible by m {}",
                cfg.code_dim, cfg.m
            )));
        }
        let mut r = rng::stream(seed, "toy-modality-init");
        let encoder = Mlp::new(2, cfg.hidden, cfg.code_dim, &mut r);
        let decoder = Mlp::new(cfg.code_dim, cfg.hidden, 2, &mut r);
        let codebook = Codebook::random(cfg.m, cfg.k_m, cfg.code_dim, seed ^ 0x5eed)?;
        let dim = cfg.code_dim / cfg.m;
        let mut ema_sum: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; dim]; cfg.k_m]; cfg.m];
        for m in 0..cfg.m {
            for i in 0..cfg.k_m {
                for (d, v) in codebook.subs[m].vector(i).iter().enumerate() {
                    ema_sum[m][i][d] = v * 1e-3;
                }
            }
        }
        Ok(Self {
            ema_count: vec![vec![1e-3; cfg.k_m]; cfg.m],
            ema_sum,
            last_used: vec![vec![0; cfg.k_m]; cfg.m],
            step: 0,
            recent: vec![Vec::new(); cfg.m],
            revive_rng: rng::SplitMix64::new(rng::derive(seed, "revive")),
            cfg,
            encoder,
            decoder,
            codebook,
        })
    }

    pub fn encode_latent(&self, p: &[f64; 2]) -> Vec<f64> {
        self.encoder.forward(p).0
    }

    /// One mini-batch of reconstruction + VQ training. Returns the losses and
    /// per-task gradient norms for GradNorm.
    pub fn reconstruction_step(&mut self, batch: &[[f64; 2]]) -> Result<RecStepStats> {
        self.step += 1;
        let mut enc_g = self.encoder.zeros_grads();
        let mut dec_g = self.decoder.zeros_grads();
        let mut enc_commit_g = self.encoder.zeros_grads();
        let mut rec_total = 0.0;
        let mut commit_total = 0.0;
        let n = batch.len() as f64;
        let dim = self.codebook.chunk_dim();
        let mut assignments: Vec<(usize, usize, Vec<f64>)> = Vec::new();

        for p in batch {
            let (z, enc_tape) = self.encoder.forward(p);
            let code = quantize(&self.codebook, &z)?;
            let (dec_out, dec_tape) = self.decoder.forward(&code.representative);
            let err: Vec<f64> = dec_out.iter().zip(p).map(|(a, b)| a - b).collect();
            let rec: f64 = err.iter().map(|e| e * e).sum();
            rec_total += rec;
            let (_, commit) = vq_losses(&z, &code);
            commit_total += commit;

            // Decoder backward; gradient w.r.t. the representative flows
            // straight through to the encoder output.
            let dout: Vec<f64> = err.iter().map(|e| 2.0 * e / n).collect();
            let d_rep = self.decoder.backward(&dec_tape, &dout, &mut dec_g);
            self.encoder.backward(&enc_tape, &d_rep, &mut enc_g);

            // Commitment gradient on the encoder: 2 (z - c).
            let d_commit: Vec<f64> = z
                .iter()
                .zip(&code.representative)
                .map(|(a, b)| 2.0 * (a - b) / n)
                .collect();
            self.encoder.backward(&enc_tape, &d_commit, &mut enc_commit_g);

            for (m, &idx) in code.indices.iter().enumerate() {
                assignments.push((m, idx, z[m * dim..(m + 1) * dim].to_vec()));
            }
        }

        let rec_loss = rec_total / n;
        let commitment_loss = commit_total / n;
        if !rec_loss.is_finite() || !commitment_loss.is_finite() {
            return Err(Error::Divergence(format!(
                "toy modality losses diverged: rec={rec_loss} commit={commitment_loss}"
            )));
        }

        let norm = |g: &MlpGrads| -> f64 {
            (g.w1.iter().chain(&g.b1).chain(&g.w2).chain(&g.b2))
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
        };
        let rec_grad_norm = (norm(&enc_g).powi(2) + norm(&dec_g).powi(2)).sqrt();
        let commit_grad_norm = norm(&enc_commit_g);

        // Apply: decoder takes rec grads, encoder takes rec + weighted commit.
        self.decoder.sgd(&dec_g, self.cfg.learning_rate);
        self.encoder.sgd(&enc_g, self.cfg.learning_rate);
        self.encoder
            .sgd(&enc_commit_g, self.cfg.learning_rate * COMMITMENT_WEIGHT);

        // EMA codebook update.
        let decay = self.cfg.ema_decay;
        let mut batch_count = vec![vec![0.0; self.cfg.k_m]; self.cfg.m];
        let mut batch_sum = vec![vec![vec![0.0; dim]; self.cfg.k_m]; self.cfg.m];
        for (m, idx, chunk) in &assignments {
            batch_count[*m][*idx] += 1.0;
            for (a, b) in batch_sum[*m][*idx].iter_mut().zip(chunk) {
                *a += b;
            }
            self.last_used[*m][*idx] = self.step;
            let ring = &mut self.recent[*m];
            ring.push(chunk.clone());
            if ring.len() > 256 {
                ring.remove(0);
            }
        }
        let mut codebook_loss = 0.0;
        for m in 0..self.cfg.m {
            for i in 0..self.cfg.k_m {
                self.ema_count[m][i] = decay * self.ema_count[m][i] + (1.0 - decay) * batch_count[m][i];
                for d in 0..dim {
                    self.ema_sum[m][i][d] =
                        decay * self.ema_sum[m][i][d] + (1.0 - decay) * batch_sum[m][i][d];
                }
                let denom = self.ema_count[m][i].max(1e-9);
                for d in 0..dim {
                    self.codebook.subs[m].vectors[i * dim + d] = self.ema_sum[m][i][d] / denom;
                }
                // Dead-code revival: re-seed to a random recent encoder chunk.
                if self.step.saturating_sub(self.last_used[m][i]) >= self.cfg.revive_after
                    && !self.recent[m].is_empty()
                {
                    let pick = (rng::uniform_f64(&mut self.revive_rng)
                        * self.recent[m].len() as f64) as usize;
                    let chunk = self.recent[m][pick.min(self.recent[m].len() - 1)].clone();
                    for d in 0..dim {
                        self.codebook.subs[m].vectors[i * dim + d] = chunk[d];
                        self.ema_sum[m][i][d] = chunk[d] * 1e-3;
                    }
                    self.ema_count[m][i] = 1e-3;
                    self.last_used[m][i] = self.step;
                }
            }
        }
        // Codebook loss reported for completeness (EMA updates the tables).
        for (m, idx, chunk) in &assignments {
            let v = self.codebook.subs[*m].vector(*idx);
            codebook_loss += chunk.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        codebook_loss /= n;

        Ok(RecStepStats {
            rec_loss,
            commitment_loss,
            codebook_loss,
            rec_grad_norm,
            commit_grad_norm,
        })
    }

    /// Tokens for one point: M consecutive ids, slot m in its own range.
    pub fn encode_point_tokens(&self, p: &[f64; 2]) -> Result<Vec<usize>> {
        let z = self.encode_latent(p);
        let code = quantize(&self.codebook, &z)?;
        Ok(code
            .indices
            .iter()
            .enumerate()
            .map(|(m, &idx)| self.codebook.flatten_index(m, idx))
            .collect())
    }

    /// Decode M flat tokens back to a 2D point via the representative vector.
    pub fn decode_point_tokens(&self, tokens: &[usize]) -> Result<[f64; 2]> {
        if tokens.len() != self.cfg.m {
            return Err(Error::Shape(format!(
                "expected {} tokens per point, got {}",
                self.cfg.m,
                tokens.len()
            )));
        }
        let mut indices = Vec::with_capacity(self.cfg.m);
        for (slot, &tok) in tokens.iter().enumerate() {
            let (m, idx) = self
                .codebook
                .unflatten_token(tok)
                .ok_or_else(|| Error::Domain(format!("token {tok} is not a code token")))?;
            if m != slot {
                return Err(Error::Domain(format!(
                    "token {tok} belongs to slot {m}, expected slot {slot}"
                )));
            }
            indices.push(idx);
        }
        let rep = representative_lookup(&self.codebook, &indices)?;
        let (out, _) = self.decoder.forward(&rep);
        Ok([out[0], out[1]])
    }

    /// Mean squared reconstruction error over a corpus.
    pub fn reconstruction_mse(&self, points: &[[f64; 2]]) -> Result<f64> {
        let mut total = 0.0;
        for p in points {
            let tokens = self.encode_point_tokens(p)?;
            let q = self.decode_point_tokens(&tokens)?;
            total += (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2);
        }
        Ok(total / points.len() as f64)
    }

    /// Fraction of codes used at least once encoding the corpus, and the
    /// normalized usage entropy.
    pub fn usage_stats(&self, points: &[[f64; 2]]) -> Result<(f64, f64)> {
        let mut counts = vec![vec![0u64; self.cfg.k_m]; self.cfg.m];
        for p in points {
            let z = self.encode_latent(p);
            let code = quantize(&self.codebook, &z)?;
            for (m, &idx) in code.indices.iter().enumerate() {
                counts[m][idx] += 1;
            }
        }
        let total: u64 = counts.iter().flatten().sum();
        let used = counts.iter().flatten().filter(|&&c| c > 0).count();
        let capacity = self.cfg.m * self.cfg.k_m;
        let mut entropy = 0.0;
        for &c in counts.iter().flatten() {
            if c > 0 {
                let p = c as f64 / total as f64;
                entropy -= p * p.ln();
            }
        }
        Ok((used as f64 / capacity as f64, entropy))
    }

    /// Vocabulary over the flat token space: specials plus one embedding per
    /// code, using unit-normalized sub-codebook vectors as token embeddings.
    pub fn vocabulary(&self, seed: u64) -> Result<Vocabulary> {
        let dim = self.codebook.chunk_dim();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut r = rng::stream(seed, "signal-vocab-specials");
        for _ in 0..SPECIAL_TOKENS {
            let mut v: Vec<f64> = (0..dim).map(|_| rng::gauss(&mut r)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter_mut().for_each(|x| *x /= n);
            rows.push(v);
        }
        for sub in &self.codebook.subs {
            for i in 0..sub.k {
                let mut v = sub.vector(i).to_vec();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n < 1e-9 {
                    let mut fallback: Vec<f64> = (0..dim).map(|_| rng::gauss(&mut r)).collect();
                    let fn_ = fallback.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    fallback.iter_mut().for_each(|x| *x /= fn_);
                    v = fallback;
                } else {
                    v.iter_mut().for_each(|x| *x /= n);
                }
                rows.push(v);
            }
        }
        Vocabulary::from_embeddings(rows, PAD, EOS)
    }
}

impl ToyModality {
    /// Serialize encoder, decoder, and codebook in the shared checkpoint
    /// tensor format.
    pub fn to_tensors(&self) -> crate::denoiser::checkpoint::TensorSet {
        let mut set = crate::denoiser::checkpoint::TensorSet::default();
        let enc = &self.encoder;
        set.push("encoder.w1", &[enc.hidden, enc.in_dim], &enc.w1);
        set.push("encoder.b1", &[enc.hidden], &enc.b1);
        set.push("encoder.w2", &[enc.w2.len() / enc.hidden, enc.hidden], &enc.w2);
        set.push("encoder.b2", &[enc.b2.len()], &enc.b2);
        let dec = &self.decoder;
        set.push("decoder.w1", &[dec.hidden, dec.in_dim], &dec.w1);
        set.push("decoder.b1", &[dec.hidden], &dec.b1);
        set.push("decoder.w2", &[dec.w2.len() / dec.hidden, dec.hidden], &dec.w2);
        set.push("decoder.b2", &[dec.b2.len()], &dec.b2);
        for (m, sub) in self.codebook.subs.iter().enumerate() {
            set.push(&format!("codebook.{m}"), &[sub.k, sub.dim], &sub.vectors);
        }
        set
    }

    /// Rebuild a codec from a checkpoint; the config fixes the dimensions.
    pub fn from_tensors(
        cfg: ToyModalityConfig,
        set: &crate::denoiser::checkpoint::TensorSet,
    ) -> Result<Self> {
        let mut out = Self::new(cfg, 0)?;
        let load = |name: &str, dst: &mut Vec<f64>| -> Result<()> {
            let (_, data) = set
                .get(name)
                .ok_or_else(|| Error::Serde(format!("checkpoint missing tensor {name}")))?;
            if data.len() != dst.len() {
                return Err(Error::Serde(format!(
                    "tensor {name} has {} values, expected {}",
                    data.len(),
                    dst.len()
                )));
            }
            dst.copy_from_slice(data);
            Ok(())
        };
        load("encoder.w1", &mut out.encoder.w1)?;
        load("encoder.b1", &mut out.encoder.b1)?;
        load("encoder.w2", &mut out.encoder.w2)?;
        load("encoder.b2", &mut out.encoder.b2)?;
        load("decoder.w1", &mut out.decoder.w1)?;
        load("decoder.b1", &mut out.decoder.b1)?;
        load("decoder.w2", &mut out.decoder.w2)?;
        load("decoder.b2", &mut out.decoder.b2)?;
        for m in 0..out.codebook.m() {
            let name = format!("codebook.{m}");
            let (_, data) = set
                .get(&name)
                .ok_or_else(|| Error::Serde(format!("checkpoint missing tensor {name}")))?;
            if data.len() != out.codebook.subs[m].vectors.len() {
                return Err(Error::Serde(format!("tensor {name} shape mismatch")));
            }
            out.codebook.subs[m].vectors.copy_from_slice(data);
        }
        Ok(out)
    }
}

/// Train the toy codec on a 2D corpus.
pub fn fit_toy_modality(
    points: &[[f64; 2]],
    cfg: ToyModalityConfig,
    seed: u64,
) -> Result<ToyModality> {
    if points.is_empty() {
        return Err(Error::Precondition("empty corpus".into()));
    }
    let mut modality = ToyModality::new(cfg, seed)?;
    let mut r = rng::stream(seed, "toy-modality-train");
    for _ in 0..modality.cfg.steps {
        let batch: Vec<[f64; 2]> = (0..modality.cfg.batch)
            .map(|_| points[(rng::uniform_f64(&mut r) * points.len() as f64) as usize % points.len()])
            .collect();
        modality.reconstruction_step(&batch)?;
    }
    Ok(modality)
}

// ---------------------------------------------------------------------------
// sub-codebook prediction heads
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Next-token style: slot m conditions on the previous slots' indices.
    Sequential,
    /// Multi-token style: M independent heads.
    Parallel,
}

const PREV_EMB_DIM: usize = 8;

/// One slot's head: a small MLP over `[hidden_state ; prev-index embedding]`
/// (sequential) or a widened MLP over the hidden state alone (parallel, with
/// the hidden width chosen to match the sequential parameter count).
#[derive(Debug, Clone)]
struct SlotHead {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    in_dim: usize,
    hidden: usize,
    /// Sequential only: embedding table for the previous slot's index
    /// (slot 0 uses a learned start row, stored as a 1-row table).
    prev_emb: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SubcodeHeads {
    pub mode: HeadMode,
    pub m: usize,
    pub k_m: usize,
    pub input_dim: usize,
    slots: Vec<SlotHead>,
}

impl SubcodeHeads {
    pub fn new(mode: HeadMode, m: usize, k_m: usize, input_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "subcode-heads");
        let mut slots = Vec::with_capacity(m);
        for slot in 0..m {
            let prev_k = if slot == 0 { 1 } else { k_m };
            let (in_dim, hid) = match mode {
                HeadMode::Sequential => (input_dim + PREV_EMB_DIM, hidden),
                HeadMode::Parallel => {
                    // Match the sequential slot's parameter count by widening.
                    let seq_params = hidden * (input_dim + PREV_EMB_DIM)
                        + hidden
                        + k_m * hidden
                        + k_m
                        + prev_k * PREV_EMB_DIM;
                    let hid = ((seq_params - k_m) as f64 / (input_dim + 1 + k_m) as f64).round()
                        as usize;
                    (input_dim, hid.max(1))
                }
            };
            let s1 = 1.0 / (in_dim as f64).sqrt();
            let s2 = 1.0 / (hid as f64).sqrt();
            slots.push(SlotHead {
                w1: (0..hid * in_dim).map(|_| s1 * rng::gauss(&mut r)).collect(),
                b1: vec![0.0; hid],
                w2: (0..k_m * hid).map(|_| s2 * rng::gauss(&mut r)).collect(),
                b2: vec![0.0; k_m],
                in_dim,
                hidden: hid,
                prev_emb: match mode {
                    HeadMode::Sequential => {
                        (0..prev_k * PREV_EMB_DIM).map(|_| 0.1 * rng::gauss(&mut r)).collect()
                    }
                    HeadMode::Parallel => Vec::new(),
                },
            });
        }
        Self { mode, m, k_m, input_dim, slots }
    }

    pub fn num_params(&self) -> usize {
        self.slots
            .iter()
            .map(|s| s.w1.len() + s.b1.len() + s.w2.len() + s.b2.len() + s.prev_emb.len())
            .sum()
    }

    fn slot_input(&self, slot: usize, hidden_state: &[f64], prev_index: usize) -> Vec<f64> {
        let s = &self.slots[slot];
        match self.mode {
            HeadMode::Sequential => {
                let mut x = Vec::with_capacity(s.in_dim);
                x.extend_from_slice(hidden_state);
                let row = if slot == 0 { 0 } else { prev_index };
                x.extend_from_slice(&s.prev_emb[row * PREV_EMB_DIM..(row + 1) * PREV_EMB_DIM]);
                x
            }
            HeadMode::Parallel => hidden_state.to_vec(),
        }
    }

    /// Logits for one slot given the backbone hidden state and (sequential
    /// mode) the previous slot's index.
    pub fn slot_logits(&self, slot: usize, hidden_state: &[f64], prev_index: usize) -> Vec<f64> {
        let s = &self.slots[slot];
        let x = self.slot_input(slot, hidden_state, prev_index);
        let mut h = s.b1.clone();
        for (o, hv) in h.iter_mut().enumerate() {
            let row = &s.w1[o * s.in_dim..(o + 1) * s.in_dim];
            *hv = (*hv + row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>()).tanh();
        }
        let mut out = s.b2.clone();
        for (o, y) in out.iter_mut().enumerate() {
            let row = &s.w2[o * s.hidden..(o + 1) * s.hidden];
            *y += row.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>();
        }
        out
    }

    /// Predict all M indices. Sequential mode feeds each predicted (or
    /// teacher-forced) index into the next slot.
    pub fn decode_subcodes(&self, hidden_state: &[f64], teacher: Option<&[usize]>) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.m);
        let mut prev = 0usize;
        for slot in 0..self.m {
            let logits = self.slot_logits(slot, hidden_state, prev);
            let pred = argmax(&logits);
            out.push(pred);
            prev = match teacher {
                Some(gold) => gold[slot],
                None => pred,
            };
        }
        out
    }

    /// One SGD step of teacher-forced cross-entropy on a batch of
    /// (hidden_state, gold indices) pairs. Returns the mean loss.
    pub fn train_step(&mut self, batch: &[(Vec<f64>, Vec<usize>)], lr: f64) -> f64 {
        let n = batch.len() as f64;
        let mut total_loss = 0.0;
        // Accumulate grads per slot.
        let mut grads: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> = self
            .slots
            .iter()
            .map(|s| {
                (
                    vec![0.0; s.w1.len()],
                    vec![0.0; s.b1.len()],
                    vec![0.0; s.w2.len()],
                    vec![0.0; s.b2.len()],
                    vec![0.0; s.prev_emb.len()],
                )
            })
            .collect();
        for (h, gold) in batch {
            let mut prev = 0usize;
            for slot in 0..self.m {
                let s = &self.slots[slot];
                let x = self.slot_input(slot, h, prev);
                // forward with tape
                let mut hpre = s.b1.clone();
                for (o, hv) in hpre.iter_mut().enumerate() {
                    let row = &s.w1[o * s.in_dim..(o + 1) * s.in_dim];
                    *hv += row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
                }
                let hact: Vec<f64> = hpre.iter().map(|v| v.tanh()).collect();
                let mut logits = s.b2.clone();
                for (o, y) in logits.iter_mut().enumerate() {
                    let row = &s.w2[o * s.hidden..(o + 1) * s.hidden];
                    *y += row.iter().zip(&hact).map(|(a, b)| a * b).sum::<f64>();
                }
                let p = crate::schedule::softmax(&logits);
                total_loss -= p[gold[slot]].max(1e-300).ln();
                // backward
                let g = &mut grads[slot];
                let mut dlogits = p;
                dlogits[gold[slot]] -= 1.0;
                dlogits.iter_mut().for_each(|v| *v /= n);
                let mut dhact = vec![0.0; s.hidden];
                for (o, &dl) in dlogits.iter().enumerate() {
                    g.3[o] += dl;
                    let row = &s.w2[o * s.hidden..(o + 1) * s.hidden];
                    let grow = &mut g.2[o * s.hidden..(o + 1) * s.hidden];
                    for i in 0..s.hidden {
                        grow[i] += dl * hact[i];
                        dhact[i] += dl * row[i];
                    }
                }
                let mut dx = vec![0.0; s.in_dim];
                for o in 0..s.hidden {
                    let th = hact[o];
                    let dpre = dhact[o] * (1.0 - th * th);
                    g.1[o] += dpre;
                    let row = &s.w1[o * s.in_dim..(o + 1) * s.in_dim];
                    let grow = &mut g.0[o * s.in_dim..(o + 1) * s.in_dim];
                    for i in 0..s.in_dim {
                        grow[i] += dpre * x[i];
                        dx[i] += dpre * row[i];
                    }
                }
                if self.mode == HeadMode::Sequential {
                    let row_idx = if slot == 0 { 0 } else { prev };
                    let emb_grad = &dx[self.input_dim..];
                    let dst = &mut g.4[row_idx * PREV_EMB_DIM..(row_idx + 1) * PREV_EMB_DIM];
                    for (a, b) in dst.iter_mut().zip(emb_grad) {
                        *a += b;
                    }
                }
                prev = gold[slot];
            }
        }
        for (s, g) in self.slots.iter_mut().zip(&grads) {
            for (w, d) in s.w1.iter_mut().zip(&g.0) {
                *w -= lr * d;
            }
            for (w, d) in s.b1.iter_mut().zip(&g.1) {
                *w -= lr * d;
            }
            for (w, d) in s.w2.iter_mut().zip(&g.2) {
                *w -= lr * d;
            }
            for (w, d) in s.b2.iter_mut().zip(&g.3) {
                *w -= lr * d;
            }
            for (w, d) in s.prev_emb.iter_mut().zip(&g.4) {
                *w -= lr * d;
            }
        }
        total_loss / (n * self.m as f64)
    }

    /// Per-slot accuracy with free-running (predicted-prefix) decoding.
    pub fn eval_accuracy(&self, batch: &[(Vec<f64>, Vec<usize>)]) -> f64 {
        let mut correct = 0usize;
        let mut total = 0usize;
        for (h, gold) in batch {
            let pred = self.decode_subcodes(h, None);
            for (p, g) in pred.iter().zip(gold) {
                total += 1;
                if p == g {
                    correct += 1;
                }
            }
        }
        correct as f64 / total.max(1) as f64
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Seeded 2D Gaussian-mixture corpus shared by quantizer tests and pipelines.
pub fn gaussian_mixture_corpus(
    components: usize,
    per_component: usize,
    spread: f64,
    seed: u64,
) -> Vec<([f64; 2], usize)> {
    let mut r = rng::stream(seed, "gaussian-mixture");
    let centers: Vec<[f64; 2]> = (0..components)
        .map(|c| {
            let angle = 2.0 * std::f64::consts::PI * c as f64 / components as f64;
            [2.0 * angle.cos(), 2.0 * angle.sin()]
        })
        .collect();
    let mut out = Vec::with_capacity(components * per_component);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_component {
            out.push((
                [
                    center[0] + spread * rng::gauss(&mut r),
                    center[1] + spread * rng::gauss(&mut r),
                ],
                c,
            ));
        }
    }
    out
}

/// Lloyd's k-means with seeded k-means++ init: the independent distortion
/// oracle the quantizer is compared against.
pub fn kmeans_oracle_mse(points: &[[f64; 2]], k: usize, iters: usize, seed: u64) -> f64 {
    let mut r = rng::stream(seed, "kmeans-oracle");
    let mut centers: Vec<[f64; 2]> = Vec::with_capacity(k);
    centers.push(points[(rng::uniform_f64(&mut r) * points.len() as f64) as usize % points.len()]);
    while centers.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                centers
                    .iter()
                    .map(|c| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let mut dart = rng::uniform_f64(&mut r) * total;
        let mut pick = 0;
        for (i, &w) in d2.iter().enumerate() {
            dart -= w;
            if dart <= 0.0 {
                pick = i;
                break;
            }
        }
        centers.push(points[pick]);
    }
    for _ in 0..iters {
        let mut sums = vec![[0.0f64; 2]; k];
        let mut counts = vec![0usize; k];
        for p in points {
            let (best, _) = centers
                .iter()
                .enumerate()
                .map(|(i, c)| (i, (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            sums[best][0] += p[0];
            sums[best][1] += p[1];
            counts[best] += 1;
        }
        for i in 0..k {
            if counts[i] > 0 {
                centers[i] = [sums[i][0] / counts[i] as f64, sums[i][1] / counts[i] as f64];
            }
        }
    }
    points
        .iter()
        .map(|p| {
            centers
                .iter()
                .map(|c| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2))
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / points.len() as f64
}
