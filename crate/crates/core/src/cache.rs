//! Similarity-gated feature cache for multi-step denoising.
//!
//! After one full forward initializes the cache, instruction-span features
//! are served from it for the rest of the generation (zero updates). Each
//! response position is gated per step: its current value feature at the
//! configured layer is compared against the cached copy, and only positions
//! whose cosine similarity falls below the threshold are recomputed (and
//! refreshed). Raw cosines are clamped at zero so `tau = 0` reuses
//! everything and any `tau > 1` forces a full recompute, which doubles as
//! the bit-identical equivalence baseline against the uncached pipeline.

use crate::denoiser::model::{ForwardCache, TrainableDenoiser};
use crate::denoiser::DenoiserOutput;
use crate::error::{Error, Result};
use crate::metrics::cosine;
use crate::sampler::{GenerationTrace, Predictor};
use crate::vocab::{Segment, TokenSequence};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct CachePolicy {
    /// Similarity threshold in `[0, 1]`; values above 1 force recompute.
    pub tau: f64,
    /// Layer whose value features drive the gate (0 = cheapest).
    pub sim_layer: usize,
}

impl Default for CachePolicy {
    fn default() -> Self {
        Self { tau: 0.95, sim_layer: 0 }
    }
}

/// Per-generation cache state and bookkeeping.
#[derive(Debug, Clone)]
pub struct CacheState {
    policy: CachePolicy,
    forward: Option<ForwardCache>,
    /// Gating reference: value features at `sim_layer` from each position's
    /// last refresh.
    gate_features: Vec<Vec<f64>>,
    instruction_mask: Vec<bool>,
    last_refresh: Vec<usize>,
    step: usize,
    pub recomputed_positions: u64,
    pub reused_positions: u64,
    /// Per-step (recomputed, reused) counters over response positions.
    pub step_log: Vec<(usize, usize)>,
}

impl CacheState {
    pub fn new(policy: CachePolicy) -> Self {
        Self {
            policy,
            forward: None,
            gate_features: Vec::new(),
            instruction_mask: Vec::new(),
            last_refresh: Vec::new(),
            step: 0,
            recomputed_positions: 0,
            reused_positions: 0,
            step_log: Vec::new(),
        }
    }

    pub fn policy(&self) -> CachePolicy {
        self.policy
    }

    pub fn is_initialized(&self) -> bool {
        self.forward.is_some()
    }

    /// Drop cached features (layout change or new generation).
    pub fn clear(&mut self) {
        self.forward = None;
        self.gate_features.clear();
        self.instruction_mask.clear();
        self.last_refresh.clear();
        self.step = 0;
        self.step_log.clear();
    }

    /// Fraction of response-position evaluations that were recomputed after
    /// initialization.
    pub fn recompute_fraction(&self) -> f64 {
        let total = self.recomputed_positions + self.reused_positions;
        if total == 0 {
            return 0.0;
        }
        self.recomputed_positions as f64 / total as f64
    }

    /// One full uncached forward that seeds every cache entry.
    pub fn initialize(
        &mut self,
        model: &TrainableDenoiser,
        x: &TokenSequence,
        t: f64,
    ) -> Result<DenoiserOutput> {
        let d = x.len();
        let mut fwd = ForwardCache::empty(model.cfg.layers, d, model.cfg.width);
        let recompute = vec![true; d];
        let out = model.forward_masked(x.tokens(), t, &recompute, &mut fwd)?;
        let sim_layer = self.policy.sim_layer.min(model.cfg.layers - 1);
        self.gate_features = fwd.v[sim_layer].clone();
        self.forward = Some(fwd);
        self.instruction_mask = (0..d).map(|i| x.segment(i) != Segment::Response).collect();
        self.last_refresh = vec![0; d];
        self.step = 0;
        self.step_log.push((0, 0));
        Ok(out)
    }

    pub fn last_refresh(&self) -> &[usize] {
        &self.last_refresh
    }

    pub fn current_step(&self) -> usize {
        self.step
    }

    pub fn forward_cache(&self) -> Option<&ForwardCache> {
        self.forward.as_ref()
    }
}

/// Forward through the cache: gate response positions on value-feature
/// similarity, recompute the failing ones, serve the rest.
pub fn cached_forward(
    model: &TrainableDenoiser,
    x: &TokenSequence,
    t: f64,
    state: &mut CacheState,
) -> Result<DenoiserOutput> {
    if state.forward.is_none() {
        return Err(Error::Precondition(
            "cache not initialized; run one full forward first".into(),
        ));
    }
    let d = x.len();
    {
        let fwd = state.forward.as_ref().unwrap();
        if fwd.len != d || state.instruction_mask.len() != d {
            return Err(Error::Shape(format!(
                "cache layout ({}) does not match sequence length ({d})",
                fwd.len
            )));
        }
    }
    state.step += 1;
    let forced = state.policy.tau > 1.0;
    let sim_layer = state.policy.sim_layer;
    if sim_layer >= model.cfg.layers {
        return Err(Error::Config(format!(
            "sim_layer {sim_layer} out of range for {} layers",
            model.cfg.layers
        )));
    }

    let mut recompute = vec![false; d];
    let mut fresh_gate: Vec<(usize, Vec<f64>)> = Vec::new();
    if forced {
        // Equivalence baseline: everything recomputed, including instruction.
        recompute.iter_mut().for_each(|r| *r = true);
    } else {
        let response: Vec<usize> = (0..d).filter(|&i| !state.instruction_mask[i]).collect();
        fresh_gate = model.gating_value_features(
            x.tokens(),
            t,
            sim_layer,
            &response,
            state.forward.as_ref().unwrap(),
        )?;
        for (i, feat) in &fresh_gate {
            // Clamp negative cosines so tau = 0 is the reuse-everything bound.
            let sim = cosine(feat, &state.gate_features[*i]).max(0.0);
            recompute[*i] = sim < state.policy.tau;
        }
    }

    let step_recomputed = (0..d)
        .filter(|&i| !state.instruction_mask[i] && recompute[i])
        .count();
    let step_reused = (0..d)
        .filter(|&i| !state.instruction_mask[i] && !recompute[i])
        .count();
    state.recomputed_positions += step_recomputed as u64;
    state.reused_positions += step_reused as u64;
    state.step_log.push((step_recomputed, step_reused));

    let fwd = state.forward.as_mut().unwrap();
    let out = model.forward_masked(x.tokens(), t, &recompute, fwd)?;
    for i in 0..d {
        if recompute[i] {
            state.last_refresh[i] = state.step;
            if !forced {
                if let Some((_, feat)) = fresh_gate.iter().find(|(p, _)| *p == i) {
                    state.gate_features[i] = feat.clone();
                }
            }
        }
    }
    if forced {
        state.gate_features = state.forward.as_ref().unwrap().v[sim_layer].clone();
    }
    Ok(out)
}

/// Predictor wrapper running the sampler through the cache. CFG keeps one
/// cache per conditioning branch.
pub struct CachedModelPredictor<'a> {
    pub model: &'a TrainableDenoiser,
    state: CacheState,
    uncond_state: CacheState,
    last_stats: (usize, usize),
}

impl<'a> CachedModelPredictor<'a> {
    pub fn new(model: &'a TrainableDenoiser, policy: CachePolicy) -> Self {
        Self {
            model,
            state: CacheState::new(policy),
            uncond_state: CacheState::new(policy),
            last_stats: (0, 0),
        }
    }

    pub fn state(&self) -> &CacheState {
        &self.state
    }

    fn branch_forward(
        &mut self,
        x: &TokenSequence,
        t: f64,
        condition_dropped: bool,
    ) -> Result<DenoiserOutput> {
        let view;
        let seq: &TokenSequence = if condition_dropped {
            view = TokenSequence::from_parts_unchecked(
                self.model.conditioning_tokens(x, true),
                x.segments().to_vec(),
            );
            &view
        } else {
            x
        };
        let state = if condition_dropped { &mut self.uncond_state } else { &mut self.state };
        if state.is_initialized() {
            cached_forward(self.model, seq, t, state)
        } else {
            state.initialize(self.model, seq, t)
        }
    }
}

impl Predictor for CachedModelPredictor<'_> {
    fn predict(&mut self, x: &TokenSequence, t: f64, condition_dropped: bool) -> Result<DenoiserOutput> {
        let out = self.branch_forward(x, t, condition_dropped)?;
        if !condition_dropped {
            self.last_stats = *self.state.step_log.last().unwrap_or(&(0, 0));
        }
        Ok(out)
    }

    fn last_cache_stats(&self) -> Option<(usize, usize)> {
        Some(self.last_stats)
    }

    fn reset_session(&mut self) {
        self.state.clear();
        self.uncond_state.clear();
    }
}

/// Paired-run comparison between uncached and cached generations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub tau: f64,
    pub wall_clock_ratio: f64,
    pub recompute_fraction: f64,
    pub mean_uncached_ms: f64,
    pub mean_cached_ms: f64,
    /// TV between cached and uncached output distributions when available;
    /// a measured report, not an asserted bound.
    pub output_drift_tv: Option<f64>,
    pub runs: usize,
}

/// Aggregate paired traces (identical seeds/configs) into a speedup report.
pub fn speedup_report(
    tau: f64,
    uncached: &[GenerationTrace],
    cached: &[GenerationTrace],
    recompute_fraction: f64,
    output_drift_tv: Option<f64>,
) -> Result<SpeedupReport> {
    if uncached.len() != cached.len() || uncached.is_empty() {
        return Err(Error::Comparison(format!(
            "trace sets must pair up: {} vs {}",
            uncached.len(),
            cached.len()
        )));
    }
    for (a, b) in uncached.iter().zip(cached) {
        if a.steps.len() != b.steps.len() {
            return Err(Error::Comparison(format!(
                "paired traces ran different step counts: {} vs {}",
                a.steps.len(),
                b.steps.len()
            )));
        }
    }
    let total_uncached: f64 = uncached.iter().map(|t| t.total_ms()).sum();
    let total_cached: f64 = cached.iter().map(|t| t.total_ms()).sum();
    Ok(SpeedupReport {
        tau,
        wall_clock_ratio: total_uncached / total_cached.max(1e-12),
        recompute_fraction,
        mean_uncached_ms: total_uncached / uncached.len() as f64,
        mean_cached_ms: total_cached / cached.len() as f64,
        output_drift_tv,
        runs: uncached.len(),
    })
}
