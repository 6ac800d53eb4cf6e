//! Training objective, multi-loss balancing, and batch planning.
//!
//! Per example: draw `t ~ U[0,1]`, corrupt the response span along the path,
//! optionally drop the conditioning (CFG), run the denoiser, and take the
//! masked cross-entropy against the clean sequence. The overall objective is
//! `lambda1 * l_ce + lambda2 * l_rec_sig + lambda3 * l_rec_aux`, with the
//! coefficients balanced online by GradNorm so each loss contributes equal
//! gradient magnitude.

use crate::denoiser::model::{Params, TrainableDenoiser};
use crate::denoiser::DenoiserOutput;
use crate::error::{Error, Result};
use crate::rng;
use crate::schedule::{softmax, PathSchedule};
use crate::vocab::{TokenSequence, Vocabulary};
use rand::RngCore;
use serde::{Deserialize, Serialize};

/// Decomposition of one optimization step's losses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_rec_sig: f64,
    pub l_rec_aux: f64,
    pub lambdas: [f64; 3],
    pub l_overall: f64,
    /// Number of examples whose conditioning was dropped this step.
    pub dropped_conditions: usize,
}

impl LossBreakdown {
    pub fn compose(l_ce: f64, l_rec_sig: f64, l_rec_aux: f64, lambdas: [f64; 3], dropped: usize) -> Self {
        let l_overall = lambdas[0] * l_ce + lambdas[1] * l_rec_sig + lambdas[2] * l_rec_aux;
        Self { l_ce, l_rec_sig, l_rec_aux, lambdas, l_overall, dropped_conditions: dropped }
    }
}

/// Masked DFM cross-entropy: mean over response positions of
/// `-log softmax(logits[i])[x1^i]`; instruction and pad positions contribute
/// nothing.
pub fn dfm_ce_loss(output: &DenoiserOutput, x1: &TokenSequence) -> Result<f64> {
    Ok(dfm_ce_loss_and_grad(output, x1)?.0)
}

/// Loss plus its gradient w.r.t. the logits: `softmax - onehot` on response
/// rows (scaled by 1/|response|), exactly zero elsewhere.
pub fn dfm_ce_loss_and_grad(
    output: &DenoiserOutput,
    x1: &TokenSequence,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if output.len() != x1.len() {
        return Err(Error::Shape(format!(
            "logit rows {} vs sequence length {}",
            output.len(),
            x1.len()
        )));
    }
    let response: Vec<usize> = x1.response_positions().collect();
    if response.is_empty() {
        return Err(Error::Precondition("sequence has an empty response segment".into()));
    }
    let scale = 1.0 / response.len() as f64;
    let k = output.logits[0].len();
    let mut grad = vec![vec![0.0; k]; x1.len()];
    let mut loss = 0.0;
    for &i in &response {
        let p = softmax(&output.logits[i]);
        let target = x1.token(i);
        loss -= p[target].max(1e-300).ln();
        for (g, &pv) in grad[i].iter_mut().zip(&p) {
            *g = pv * scale;
        }
        grad[i][target] -= scale;
    }
    Ok((loss * scale, grad))
}

/// GradNorm coefficient update.
///
/// `weighted_norms[k]` is the measured gradient norm of the *weighted* task
/// loss (`lambda_k * L_k`). The target norm for task k is
/// `mean(norms) * r_k^alpha` where `r_k` is the relative inverse training
/// rate `(L_k / L_k(0)) / mean_j(L_j / L_j(0))`; each coefficient steps down
/// the sign gradient of `|G_k - target_k|` and the set is renormalized to
/// sum to the task count.
pub fn gradnorm_update(
    lambdas: &[f64],
    weighted_norms: &[f64],
    initial_losses: &[f64],
    current_losses: &[f64],
    alpha: f64,
    lr: f64,
) -> Result<Vec<f64>> {
    let k = lambdas.len();
    if weighted_norms.len() != k || initial_losses.len() != k || current_losses.len() != k {
        return Err(Error::Shape("gradnorm inputs must share the task count".into()));
    }
    if lambdas.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
        return Err(Error::Domain("lambdas must be positive and finite".into()));
    }
    if weighted_norms.iter().any(|n| !n.is_finite()) {
        return Err(Error::Domain("gradient norms must be finite".into()));
    }
    let mean_norm: f64 = weighted_norms.iter().sum::<f64>() / k as f64;
    if mean_norm <= 0.0 {
        // No gradient signal; no-op.
        return Ok(lambdas.to_vec());
    }
    let rates: Vec<f64> = initial_losses
        .iter()
        .zip(current_losses)
        .map(|(&l0, &l)| if l0.abs() > 1e-12 { l / l0 } else { 1.0 })
        .collect();
    let mean_rate: f64 = rates.iter().sum::<f64>() / k as f64;
    let mut new = Vec::with_capacity(k);
    for i in 0..k {
        let rel = if mean_rate.abs() > 1e-12 { rates[i] / mean_rate } else { 1.0 };
        let target = mean_norm * rel.max(0.0).powf(alpha);
        let diff = weighted_norms[i] - target;
        // d|G - target| / d lambda = sign(diff) * (G / lambda).
        let step = lr * diff.signum() * (weighted_norms[i] / lambdas[i]);
        new.push((lambdas[i] - step).max(1e-3));
    }
    let total: f64 = new.iter().sum();
    let scale = k as f64 / total;
    new.iter_mut().for_each(|l| *l *= scale);
    Ok(new)
}

/// One modality-tagged training batch: indices into the dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedBatch {
    pub modality: String,
    pub indices: Vec<usize>,
}

/// Round-robin single-modality batch plan with gradient accumulation.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub batches: Vec<PlannedBatch>,
    pub accumulation_steps: usize,
    pub warnings: Vec<String>,
}

/// Interleave single-modality batches round-robin over the manifest's
/// modality buckets. Every batch carries exactly one tag; empty buckets are
/// skipped with a warning.
pub fn plan_batches<R: RngCore>(
    manifest: &[(usize, String)],
    batch_size: usize,
    accumulation_steps: usize,
    rng: &mut R,
) -> Result<BatchPlan> {
    if batch_size == 0 || accumulation_steps == 0 {
        return Err(Error::Config("batch_size and accumulation_steps must be positive".into()));
    }
    // Bucket indices per modality, preserving first-appearance order of tags.
    let mut order: Vec<String> = Vec::new();
    let mut buckets: std::collections::BTreeMap<String, Vec<usize>> = Default::default();
    for (idx, tag) in manifest {
        if !buckets.contains_key(tag) {
            order.push(tag.clone());
        }
        buckets.entry(tag.clone()).or_default().push(*idx);
    }
    let mut warnings = Vec::new();
    // Seeded shuffle within each bucket.
    for bucket in buckets.values_mut() {
        for i in (1..bucket.len()).rev() {
            let j = (rng::uniform_f64(rng) * (i + 1) as f64) as usize;
            bucket.swap(i, j.min(i));
        }
    }
    let mut cursors: std::collections::BTreeMap<String, usize> = Default::default();
    for tag in &order {
        if buckets[tag].is_empty() {
            warnings.push(format!("modality bucket '{tag}' is empty; skipped"));
        }
        cursors.insert(tag.clone(), 0);
    }
    let mut batches = Vec::new();
    loop {
        let mut emitted = false;
        for tag in &order {
            let bucket = &buckets[tag];
            let cursor = cursors.get_mut(tag).unwrap();
            if *cursor >= bucket.len() {
                continue;
            }
            let end = (*cursor + batch_size).min(bucket.len());
            batches.push(PlannedBatch { modality: tag.clone(), indices: bucket[*cursor..end].to_vec() });
            *cursor = end;
            emitted = true;
        }
        if !emitted {
            break;
        }
    }
    Ok(BatchPlan { batches, accumulation_steps, warnings })
}

/// Optimizer and CFG-dropout settings for the denoiser trainer.
/// Optimizer family. Plain SGD with momentum is the default;
/// Adam is available where SGD's noise floor caps model quality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Adam second-moment decay.
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub cfg_drop_prob: f64,
    pub gradnorm_alpha: f64,
    pub gradnorm_lr: f64,
    /// GradNorm update cadence in optimizer steps (1 = every step).
    pub gradnorm_every: usize,
    /// Linear decay floor: lr falls from `learning_rate` to
    /// `learning_rate * lr_floor_fraction` over a planned horizon.
    pub lr_floor_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.1,
            momentum: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            batch_size: 64,
            accumulation_steps: 1,
            cfg_drop_prob: 0.1,
            gradnorm_alpha: 1.0,
            gradnorm_lr: 0.002,
            gradnorm_every: 1,
            lr_floor_fraction: 0.05,
        }
    }
}

/// A single training example: the clean sequence, its modality tag, and the
/// optional raw signal the reconstruction losses are computed from.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub x1: TokenSequence,
    pub modality: String,
    pub signal: Option<[f64; 2]>,
}

/// Decide per-example CFG drops; factored out so the dropout rate is
/// testable over large counts without forwards.
pub fn plan_cfg_drops<R: RngCore>(count: usize, drop_prob: f64, rng: &mut R) -> Vec<bool> {
    (0..count).map(|_| rng::uniform_f64(rng) < drop_prob).collect()
}

/// SGD-with-momentum denoiser trainer with GradNorm-balanced multi-loss.
pub struct Trainer<'a> {
    pub model: &'a mut TrainableDenoiser,
    pub config: TrainConfig,
    velocity: Params,
    second_moment: Params,
    pub lambdas: [f64; 3],
    initial_losses: Option<[f64; 3]>,
    pending: Vec<Params>,
    pending_batches: usize,
    step_count: usize,
    last_ce_grad_norm: f64,
    /// Toy signal modality for reconstruction losses, when trained jointly.
    pub signal_codec: Option<crate::mcq::ToyModality>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a mut TrainableDenoiser, config: TrainConfig) -> Self {
        let velocity = Params::zeros(&model.cfg);
        let second_moment = Params::zeros(&model.cfg);
        Self {
            model,
            config,
            velocity,
            second_moment,
            lambdas: [1.0; 3],
            initial_losses: None,
            pending: Vec::new(),
            pending_batches: 0,
            step_count: 0,
            last_ce_grad_norm: 0.0,
            signal_codec: None,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step_count
    }

    /// RMS per-example CE gradient norm from the most recent micro-batch.
    pub fn last_ce_grad_norm(&self) -> f64 {
        self.last_ce_grad_norm
    }

    /// One micro-batch: corrupt, forward, backward, stash gradients; applies
    /// the optimizer update once `accumulation_steps` micro-batches are in.
    pub fn training_step<R: RngCore>(
        &mut self,
        batch: &[TrainExample],
        schedule: &PathSchedule,
        vocab: &Vocabulary,
        rng: &mut R,
    ) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::Precondition("empty batch".into()));
        }
        let modality = &batch[0].modality;
        if batch.iter().any(|e| &e.modality != modality) {
            return Err(Error::PlanViolation(format!(
                "batch mixes modalities (first = '{modality}')"
            )));
        }

        let drops = plan_cfg_drops(batch.len(), self.config.cfg_drop_prob, rng);
        let mut grad_sum = Params::zeros(&self.model.cfg);
        let mut ce_total = 0.0;
        let mut ce_grad_sq = 0.0;
        for (example, &dropped) in batch.iter().zip(&drops) {
            let t = rng::uniform_f64(rng);
            let x_t = schedule.corrupt_response(vocab, &example.x1, t, rng)?;
            let tokens = if dropped {
                self.model.conditioning_tokens(&x_t, true)
            } else {
                x_t.tokens().to_vec()
            };
            let (out, tape) = self.model.forward_train(&tokens, t)?;
            let (loss, dlogits) = dfm_ce_loss_and_grad(&out, &example.x1)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("non-finite CE loss {loss}")));
            }
            ce_total += loss;
            let g = self.model.backward(&tape, &dlogits, None)?;
            let gn = g.l2_norm();
            ce_grad_sq += gn * gn;
            grad_sum.axpy(1.0, &g);
        }
        let n = batch.len() as f64;
        grad_sum.scale(1.0 / n);
        let l_ce = ce_total / n;
        let ce_norm = (ce_grad_sq / n).sqrt();
        self.last_ce_grad_norm = ce_norm;

        // Reconstruction losses from the signal codec for signal batches.
        let (l_rec_sig, l_rec_aux, rec_norms) = if let Some(codec) = &mut self.signal_codec {
            if modality == "signal" {
                let points: Vec<[f64; 2]> = batch.iter().filter_map(|e| e.signal).collect();
                if points.is_empty() {
                    (0.0, 0.0, [0.0, 0.0])
                } else {
                    let stats = codec.reconstruction_step(&points)?;
                    (stats.rec_loss, stats.commitment_loss, [stats.rec_grad_norm, stats.commit_grad_norm])
                }
            } else {
                (0.0, 0.0, [0.0, 0.0])
            }
        } else {
            (0.0, 0.0, [0.0, 0.0])
        };

        // Scale CE gradients by lambda1 and stash for accumulation.
        grad_sum.scale(self.lambdas[0]);
        self.pending.push(grad_sum);
        self.pending_batches += 1;

        let losses = [l_ce, l_rec_sig, l_rec_aux];
        if self.initial_losses.is_none() {
            self.initial_losses = Some(losses);
        }

        if self.pending_batches >= self.config.accumulation_steps {
            let mut total = Params::tree_reduce(std::mem::take(&mut self.pending))
                .expect("pending gradients present");
            let scale = 1.0 / self.pending_batches as f64;
            self.pending_batches = 0;
            self.step_count += 1;
            match self.config.optimizer {
                OptimizerKind::Sgd => {
                    self.velocity.scale(self.config.momentum);
                    self.velocity.axpy(scale, &total);
                    self.model
                        .params
                        .axpy(-self.config.learning_rate, &self.velocity);
                }
                OptimizerKind::Adam => {
                    total.scale(scale);
                    self.model.params.adam_step(
                        &mut self.velocity,
                        &mut self.second_moment,
                        &total,
                        self.config.learning_rate,
                        self.config.momentum,
                        self.config.beta2,
                        self.config.adam_eps,
                        self.step_count,
                    );
                }
            }

            // GradNorm on weighted per-task norms.
            if self.config.gradnorm_every > 0 && self.step_count % self.config.gradnorm_every == 0 {
                let weighted = [
                    self.lambdas[0] * ce_norm,
                    self.lambdas[1] * rec_norms[0],
                    self.lambdas[2] * rec_norms[1],
                ];
                if weighted.iter().any(|&w| w > 0.0) {
                    let init = self.initial_losses.unwrap();
                    let new = gradnorm_update(
                        &self.lambdas,
                        &weighted,
                        &init,
                        &losses,
                        self.config.gradnorm_alpha,
                        self.config.gradnorm_lr,
                    )?;
                    self.lambdas = [new[0], new[1], new[2]];
                }
            }
        }

        let dropped = drops.iter().filter(|&&d| d).count();
        Ok(LossBreakdown::compose(l_ce, l_rec_sig, l_rec_aux, self.lambdas, dropped))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::model::ModelConfig;
    use crate::denoiser::oracle_posterior;
    use crate::dist::SparseSeqDist;
    use crate::schedule::{BaseDistribution, KappaSchedule};
    use crate::vocab::Segment;

    fn vocab(k: usize) -> Vocabulary {
        Vocabulary::random(k, 6, 2, 0, 1).unwrap()
    }

    fn mixture() -> PathSchedule {
        PathSchedule::mixture(KappaSchedule::Linear, BaseDistribution::Uniform)
    }

    fn seq(v: &Vocabulary, instr: &[usize], resp: &[usize]) -> TokenSequence {
        crate::vocab::concat_instruction_response(instr, resp, v).unwrap()
    }

    #[test]
    fn uniform_logits_loss_is_ln_k() {
        let v = vocab(16);
        let x1 = seq(&v, &[2], &[3, 4, 5]);
        let out = DenoiserOutput::from_logits(vec![vec![0.0; 16]; 4]);
        let loss = dfm_ce_loss(&out, &x1).unwrap();
        assert!((loss - 2.772588722239781).abs() < 1e-12, "loss={loss}");
    }

    #[test]
    fn delta_logits_drive_loss_to_zero() {
        let v = vocab(8);
        let x1 = seq(&v, &[2], &[3, 4]);
        let mut logits = vec![vec![0.0; 8]; 3];
        logits[1][3] = 60.0;
        logits[2][4] = 60.0;
        let out = DenoiserOutput::from_logits(logits);
        let loss = dfm_ce_loss(&out, &x1).unwrap();
        assert!(loss < 1e-9, "loss={loss}");
    }

    #[test]
    fn instruction_logits_do_not_affect_loss() {
        let v = vocab(8);
        let x1 = seq(&v, &[2, 3], &[4, 5]);
        let mut logits = vec![vec![0.1; 8]; 4];
        let out_a = DenoiserOutput::from_logits(logits.clone());
        let base = dfm_ce_loss(&out_a, &x1).unwrap();
        logits[0][1] = 99.0;
        logits[1][7] = -55.0;
        let out_b = DenoiserOutput::from_logits(logits);
        let perturbed = dfm_ce_loss(&out_b, &x1).unwrap();
        assert_eq!(base, perturbed);
    }

    #[test]
    fn empty_response_is_a_precondition_error() {
        let v = vocab(4);
        let x1 = TokenSequence::new(vec![2, 3], vec![Segment::Instruction; 2], &v).unwrap();
        let out = DenoiserOutput::from_logits(vec![vec![0.0; 4]; 2]);
        assert!(matches!(dfm_ce_loss(&out, &x1), Err(Error::Precondition(_))));
    }

    #[test]
    fn ce_gradient_is_softmax_minus_onehot_on_response_rows() {
        let v = vocab(5);
        let x1 = seq(&v, &[2], &[3]);
        let logits = vec![vec![0.3, -0.2, 0.9, 0.0, 0.4]; 2];
        let out = DenoiserOutput::from_logits(logits.clone());
        let (_, grad) = dfm_ce_loss_and_grad(&out, &x1).unwrap();
        assert!(grad[0].iter().all(|&g| g == 0.0), "masked row must be zero");
        let p = softmax(&logits[1]);
        for (k, &g) in grad[1].iter().enumerate() {
            let want = p[k] - if k == 3 { 1.0 } else { 0.0 };
            assert!((g - want).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_substitution_recovers_posterior_entropy() {
        // Expected CE of the oracle posterior against itself equals its
        // entropy on response positions.
        let v = vocab(4);
        let s = mixture();
        let q = SparseSeqDist::new(
            vec![vec![2, 3, 1], vec![2, 1, 3], vec![2, 2, 2]],
            vec![0.5, 0.3, 0.2],
        )
        .unwrap();
        let x_t = TokenSequence::new(
            vec![2, 0, 1],
            vec![Segment::Instruction, Segment::Response, Segment::Response],
            &v,
        )
        .unwrap();
        let out = oracle_posterior(&q, &s, &v, &x_t, 0.5, 1000).unwrap();
        let mut entropy = 0.0;
        let mut expected_ce = 0.0;
        for i in 1..3 {
            let p = out.probs(i);
            for &pv in p.iter().filter(|&&x| x > 0.0) {
                entropy -= pv * pv.ln();
                expected_ce -= pv * pv.max(1e-300).ln();
            }
        }
        assert!((expected_ce / 2.0 - entropy / 2.0).abs() < 1e-6);
    }

    #[test]
    fn gradnorm_fixed_point_and_invariants() {
        let l = [1.0, 1.0, 1.0];
        let out = gradnorm_update(&l, &[2.0, 2.0, 2.0], &[1.0, 1.0, 1.0], &[0.5, 0.5, 0.5], 1.0, 0.01)
            .unwrap();
        for (a, b) in l.iter().zip(&out) {
            assert!((a - b).abs() < 1e-12);
        }
        // Positivity and sum preservation.
        let out2 = gradnorm_update(&[1.5, 0.5], &[10.0, 1.0], &[1.0, 1.0], &[1.0, 1.0], 1.0, 0.01)
            .unwrap();
        assert!(out2.iter().all(|&x| x > 0.0));
        assert!((out2.iter().sum::<f64>() - 2.0).abs() < 1e-9);
        // Zero norms: no-op.
        let out3 = gradnorm_update(&[1.0, 1.0], &[0.0, 0.0], &[1.0, 1.0], &[1.0, 1.0], 1.0, 0.01)
            .unwrap();
        assert_eq!(out3, vec![1.0, 1.0]);
    }

    #[test]
    fn gradnorm_balances_ten_to_one_imbalance() {
        // Synthetic two-task problem: unweighted gradient norms fixed at 10
        // and 1, equal training rates. The weighted ratio must enter
        // [0.8, 1.25] within 500 updates.
        let mut lambdas = vec![1.0, 1.0];
        let unweighted = [10.0, 1.0];
        for _ in 0..500 {
            let weighted = [lambdas[0] * unweighted[0], lambdas[1] * unweighted[1]];
            lambdas = gradnorm_update(&lambdas, &weighted, &[1.0, 1.0], &[0.7, 0.7], 1.0, 0.002)
                .unwrap();
        }
        let ratio = (lambdas[0] * unweighted[0]) / (lambdas[1] * unweighted[1]);
        assert!((0.8..=1.25).contains(&ratio), "ratio={ratio} lambdas={lambdas:?}");
        assert!((lambdas.iter().sum::<f64>() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn cfg_drop_fraction_matches_probability() {
        let mut r = rng::stream(5, "cfg");
        let drops = plan_cfg_drops(100_000, 0.1, &mut r);
        let frac = drops.iter().filter(|&&d| d).count() as f64 / drops.len() as f64;
        assert!((frac - 0.1).abs() < 0.005, "frac={frac}");
        let mut r2 = rng::stream(5, "cfg-zero");
        let none = plan_cfg_drops(10_000, 0.0, &mut r2);
        assert_eq!(none.iter().filter(|&&d| d).count(), 0);
    }

    #[test]
    fn plan_batches_counts_and_purity() {
        let mut manifest = Vec::new();
        for i in 0..100 {
            manifest.push((i, "text".to_string()));
        }
        for i in 100..150 {
            manifest.push((i, "signal".to_string()));
        }
        for i in 150..200 {
            manifest.push((i, "aux".to_string()));
        }
        let mut r = rng::stream(0, "plan");
        let plan = plan_batches(&manifest, 10, 2, &mut r).unwrap();
        let text = plan.batches.iter().filter(|b| b.modality == "text").count();
        let signal = plan.batches.iter().filter(|b| b.modality == "signal").count();
        let aux = plan.batches.iter().filter(|b| b.modality == "aux").count();
        assert_eq!((text, signal, aux), (10, 5, 5));
        for b in &plan.batches {
            assert!(b.indices.len() <= 10);
            for &i in &b.indices {
                assert_eq!(manifest[i].1, b.modality);
            }
        }
    }

    #[test]
    fn plan_batches_equal_counts_alternate() {
        let mut manifest = Vec::new();
        for i in 0..20 {
            manifest.push((i, if i < 10 { "a".to_string() } else { "b".to_string() }));
        }
        let mut r = rng::stream(1, "plan2");
        let plan = plan_batches(&manifest, 5, 1, &mut r).unwrap();
        let tags: Vec<&str> = plan.batches.iter().map(|b| b.modality.as_str()).collect();
        assert_eq!(tags, vec!["a", "b", "a", "b"]);
    }

    #[test]
    fn single_modality_plan_is_plain_batching() {
        let manifest: Vec<(usize, String)> = (0..12).map(|i| (i, "only".to_string())).collect();
        let mut r = rng::stream(2, "plan3");
        let plan = plan_batches(&manifest, 5, 1, &mut r).unwrap();
        assert_eq!(plan.batches.len(), 3);
        let mut seen: Vec<usize> = plan.batches.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn mixed_modality_batch_is_rejected() {
        let v = vocab(6);
        let cfg = ModelConfig {
            layers: 1,
            width: 8,
            heads: 2,
            mlp_ratio: 2,
            max_len: 6,
            vocab_size: 6,
            cond_drop_token: 2,
            use_pos_embedding: true,
        };
        let mut model = TrainableDenoiser::new(cfg, 0).unwrap();
        let mut trainer = Trainer::new(&mut model, TrainConfig::default());
        let batch = vec![
            TrainExample { x1: seq(&v, &[2], &[3]), modality: "text".into(), signal: None },
            TrainExample { x1: seq(&v, &[2], &[4]), modality: "signal".into(), signal: None },
        ];
        let s = mixture();
        let mut r = rng::stream(3, "mix");
        assert!(matches!(
            trainer.training_step(&batch, &s, &v, &mut r),
            Err(Error::PlanViolation(_))
        ));
    }

    #[test]
    fn overfit_loss_decreases_and_recomposes() {
        let v = vocab(6);
        let cfg = ModelConfig {
            layers: 2,
            width: 32,
            heads: 4,
            mlp_ratio: 2,
            max_len: 6,
            vocab_size: 6,
            cond_drop_token: 2,
            use_pos_embedding: true,
        };
        let mut model = TrainableDenoiser::new(cfg, 7).unwrap();
        let tc = TrainConfig { batch_size: 8, cfg_drop_prob: 0.0, ..Default::default() };
        let mut trainer = Trainer::new(&mut model, tc);
        let s = mixture();
        let batch: Vec<TrainExample> = (0..8)
            .map(|_| TrainExample { x1: seq(&v, &[2, 3], &[4, 5, 3]), modality: "text".into(), signal: None })
            .collect();
        let mut r = rng::stream(11, "overfit");
        let mut losses = Vec::new();
        for _ in 0..50 {
            let lb = trainer.training_step(&batch, &s, &v, &mut r).unwrap();
            let recomposed =
                lb.lambdas[0] * lb.l_ce + lb.lambdas[1] * lb.l_rec_sig + lb.lambdas[2] * lb.l_rec_aux;
            assert!((recomposed - lb.l_overall).abs() < 1e-9);
            losses.push(lb.l_ce);
        }
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[40..].iter().sum::<f64>() / 10.0;
        assert!(tail < head * 0.8, "no meaningful decrease: head={head} tail={tail}");
    }

    #[test]
    fn accumulation_defers_updates() {
        let v = vocab(6);
        let cfg = ModelConfig {
            layers: 1,
            width: 8,
            heads: 2,
            mlp_ratio: 2,
            max_len: 6,
            vocab_size: 6,
            cond_drop_token: 2,
            use_pos_embedding: true,
        };
        let mut model = TrainableDenoiser::new(cfg, 0).unwrap();
        let before = model.params.to_flat();
        let tc = TrainConfig { accumulation_steps: 3, cfg_drop_prob: 0.0, ..Default::default() };
        let mut trainer = Trainer::new(&mut model, tc);
        let s = mixture();
        let batch = vec![TrainExample { x1: seq(&v, &[2], &[3, 4]), modality: "text".into(), signal: None }];
        let mut r = rng::stream(4, "accum");
        trainer.training_step(&batch, &s, &v, &mut r).unwrap();
        trainer.training_step(&batch, &s, &v, &mut r).unwrap();
        assert_eq!(trainer.steps_taken(), 0);
        assert_eq!(trainer.model.params.to_flat(), before);
        trainer.training_step(&batch, &s, &v, &mut r).unwrap();
        assert_eq!(trainer.steps_taken(), 1);
        assert_ne!(trainer.model.params.to_flat(), before);
    }
}
