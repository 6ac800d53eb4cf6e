//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line. Tolerances are pinned in code; run with
//! `cargo test --test acceptance -- --nocapture` to see the lines.

use dfm_core::cache::{cached_forward, CachePolicy, CacheState, CachedModelPredictor};
use dfm_core::config::ExperimentConfig;
use dfm_core::corpus::{make_text_corpus, TextCorpusKind, TextCorpusSpec};
use dfm_core::denoiser::{ModelConfig, TrainableDenoiser};
use dfm_core::dist::{EmpiricalDist, SparseSeqDist};
use dfm_core::experiment::{ce_entropy_gap, run_experiment, train_denoiser};
use dfm_core::metrics::tv_distance;
use dfm_core::rng;
use dfm_core::sampler::{
    dynamic_length_generate, generate, ModelPredictor, OraclePredictor, SamplerConfig,
};
use dfm_core::schedule::{BaseDistribution, KappaSchedule, PathSchedule};
use dfm_core::training::{gradnorm_update, plan_cfg_drops, TrainConfig};
use dfm_core::vocab::{Segment, TokenSequence, Vocabulary};

struct Criterion {
    id: usize,
    name: &'static str,
}

impl Criterion {
    fn new(id: usize, name: &'static str) -> Self {
        Self { id, name }
    }

    fn check(&self, ok: bool, detail: String) {
        let verdict = if ok { "PASS" } else { "FAIL" };
        println!("[acceptance] C{:02} {:<28} {verdict}  {detail}", self.id, self.name);
        assert!(ok, "criterion {} ({}) failed: {detail}", self.id, self.name);
    }
}

fn metric_schedule(vocab: &Vocabulary) -> PathSchedule {
    PathSchedule::metric(3.0, 0.9, vocab).unwrap()
}

fn mixture_schedule() -> PathSchedule {
    PathSchedule::mixture(KappaSchedule::Linear, BaseDistribution::Uniform)
}

/// The K=6, |support|=8, D_response=6 benchmark corpus shared by criteria
/// 2 and 4. One instruction token plus six response positions.
fn benchmark_corpus() -> dfm_core::corpus::TextCorpus {
    let spec = TextCorpusSpec {
        kind: TextCorpusKind::Pattern,
        vocab_size: 6,
        embed_dim: 8,
        embedding_seed: 7,
        instruction_len: 1,
        response_len: 6,
        num_responses: 8,
        examples: 1024,
        append_eos: false,
        pad_to_multiple: None,
    };
    make_text_corpus(&spec, 41).unwrap()
}

fn oracle_tv(
    q: &SparseSeqDist,
    schedule: &PathSchedule,
    vocab: &Vocabulary,
    instruction: &TokenSequence,
    steps: usize,
    generations: usize,
    seed: u64,
) -> f64 {
    let cfg = SamplerConfig { steps, ..Default::default() };
    let mut empirical = EmpiricalDist::new();
    for g in 0..generations {
        let mut pred = OraclePredictor { q, schedule, vocab, cap: 100_000 };
        let gen_seed = rng::derive_tagged(seed, &[g as u64]);
        let (out, _) = generate(&mut pred, instruction, 6, &cfg, schedule, vocab, gen_seed).unwrap();
        empirical.record(out.tokens());
    }
    empirical.tv_to(q)
}

#[test]
fn c01_path_correctness() {
    let c = Criterion::new(1, "path-correctness");
    let vocab = Vocabulary::random(6, 8, 7, 0, 1).unwrap();
    let schedules = [mixture_schedule(), metric_schedule(&vocab)];

    let mut max_sum_err: f64 = 0.0;
    for schedule in &schedules {
        for step in 0..=100 {
            let t = step as f64 / 100.0;
            for x1 in 0..vocab.size() {
                let row = schedule.conditional_row(&vocab, x1, t).unwrap();
                max_sum_err = max_sum_err.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }

    let draws = 100_000usize;
    let x1 = TokenSequence::new(vec![2, 3, 4], vec![Segment::Response; 3], &vocab).unwrap();
    let mut max_tv: f64 = 0.0;
    for (si, schedule) in schedules.iter().enumerate() {
        for &t in &[0.3, 0.7] {
            let mut counts = vec![vec![0u64; vocab.size()]; 3];
            let mut r = rng::stream(1000 + si as u64, "acceptance-c1");
            for _ in 0..draws {
                let s = schedule.sample_conditional(&vocab, &x1, t, &mut r).unwrap();
                for (i, &tok) in s.tokens().iter().enumerate() {
                    counts[i][tok] += 1;
                }
            }
            for (i, row) in counts.iter().enumerate() {
                let expect = schedule.conditional_row(&vocab, x1.token(i), t).unwrap();
                let emp: Vec<f64> = row.iter().map(|&v| v as f64 / draws as f64).collect();
                max_tv = max_tv.max(tv_distance(&emp, &expect).unwrap());
            }
        }
    }

    c.check(
        max_sum_err <= 1e-9 && max_tv <= 0.02,
        format!("max row-sum err {max_sum_err:.2e} (<=1e-9), empirical TV {max_tv:.4} (<=0.02)"),
    );
}

#[test]
fn c02_oracle_sampler_convergence() {
    let c = Criterion::new(2, "oracle-sampler-convergence");
    let corpus = benchmark_corpus();
    let q = corpus.q.clone().unwrap();
    let schedule = metric_schedule(&corpus.vocab);
    let instruction = TokenSequence::new(
        corpus.instruction.clone(),
        vec![Segment::Instruction; 1],
        &corpus.vocab,
    )
    .unwrap();

    let generations = 20_000;
    let tv_n = oracle_tv(&q, &schedule, &corpus.vocab, &instruction, 256, generations, 7);
    let tv_2n = oracle_tv(&q, &schedule, &corpus.vocab, &instruction, 512, generations, 8);

    c.check(
        tv_n < 0.05 && tv_2n <= tv_n + 0.01,
        format!("TV@N=256 {tv_n:.4} (<0.05), TV@N=512 {tv_2n:.4} (<= {:.4})", tv_n + 0.01),
    );
}

#[test]
fn c03_velocity_law() {
    let c = Criterion::new(3, "velocity-law");
    let vocab = Vocabulary::random(8, 8, 3, 0, 1).unwrap();
    let schedule = metric_schedule(&vocab);
    let distances = vocab.cosine_distances();

    let mut nonneg_ok = true;
    let mut monotone_ok = true;
    for &t in &[0.05, 0.3, 0.6, 0.9] {
        for x1 in 0..vocab.size() {
            for z in 0..vocab.size() {
                for x in 0..vocab.size() {
                    let rate = dfm_core::velocity::kop_rate(&schedule, &vocab, x, z, x1, t).unwrap();
                    nonneg_ok &= rate >= 0.0;
                    if distances.get(x, x1) >= distances.get(z, x1) {
                        monotone_ok &= rate == 0.0;
                    }
                }
            }
        }
    }

    // Closed-form beta' vs central differences, relative 1e-5 on [0.05, 0.95].
    let (cc, aa) = (3.0, 0.9);
    let beta = |t: f64| cc * (t / (1.0 - t)).powf(aa);
    let h = 1e-6;
    let mut max_rel: f64 = 0.0;
    for step in 0..=90 {
        let t = 0.05 + 0.01 * step as f64;
        let fd = (beta(t + h) - beta(t - h)) / (2.0 * h);
        let cf = dfm_core::velocity::beta_prime(cc, aa, t);
        max_rel = max_rel.max(((cf - fd) / fd).abs());
    }

    c.check(
        nonneg_ok && monotone_ok && max_rel < 1e-5,
        format!("rates nonneg {nonneg_ok}, zero-toward-farther {monotone_ok}, beta' rel err {max_rel:.2e} (<1e-5)"),
    );
}

#[test]
fn c04_trained_denoiser_end_to_end() {
    let c = Criterion::new(4, "trained-denoiser");
    let corpus = benchmark_corpus();
    let q = corpus.q.clone().unwrap();
    let schedule = metric_schedule(&corpus.vocab);
    let instruction = TokenSequence::new(
        corpus.instruction.clone(),
        vec![Segment::Instruction; 1],
        &corpus.vocab,
    )
    .unwrap();

    let model_cfg = ModelConfig::small(corpus.vocab.size(), 7, dfm_core::corpus::COND_DROP);
    let mut model = TrainableDenoiser::new(model_cfg, 5).unwrap();
    let train_cfg = TrainConfig {
        batch_size: 32,
        cfg_drop_prob: 0.0,
        learning_rate: 0.08,
        ..Default::default()
    };
    train_denoiser(&mut model, &corpus, &schedule, &train_cfg, 2500, 6).unwrap();

    let (model_ce, oracle_entropy) =
        ce_entropy_gap(&model, &q, &corpus, &schedule, 512, 100_000, 9).unwrap();
    let gap = model_ce - oracle_entropy;

    let sampler_cfg = SamplerConfig { steps: 32, ..Default::default() };
    let mut empirical = EmpiricalDist::new();
    let generations = 2000;
    for g in 0..generations {
        let mut pred = ModelPredictor { model: &model };
        let gen_seed = rng::derive_tagged(77, &[g as u64]);
        let (out, _) =
            generate(&mut pred, &instruction, 6, &sampler_cfg, &schedule, &corpus.vocab, gen_seed)
                .unwrap();
        empirical.record(out.tokens());
    }
    let tv = empirical.tv_to(&q);

    c.check(
        gap.abs() < 0.1 && tv < 0.15,
        format!(
            "CE {model_ce:.4} vs oracle entropy {oracle_entropy:.4}: gap {gap:.4} (<0.1); sampling TV {tv:.4} (<0.15)"
        ),
    );
}

#[test]
fn c05_gradient_correctness() {
    let c = Criterion::new(5, "gradient-correctness");
    let cfg = ModelConfig {
        layers: 2,
        width: 16,
        heads: 2,
        mlp_ratio: 2,
        max_len: 8,
        vocab_size: 7,
        cond_drop_token: 2,
        use_pos_embedding: true,
    };
    let mut model = TrainableDenoiser::new(cfg, 7).unwrap();
    let mut r = rng::stream(99, "acceptance-gradcheck");
    let mut flat = model.params.to_flat();
    flat.iter_mut().for_each(|x| *x += 0.05 * rng::gauss(&mut r));
    model.params.set_flat(&flat);

    let tokens = vec![3usize, 4, 5, 6, 2, 3, 1, 0];
    let targets = vec![4usize, 5, 6, 2, 3, 1, 0, 3];
    let t = 0.41;
    let loss = |m: &TrainableDenoiser| -> f64 {
        let (out, _) = m.forward_train(&tokens, t).unwrap();
        let mut total = 0.0;
        for (i, row) in out.logits.iter().enumerate() {
            let p = dfm_core::schedule::softmax(row);
            total -= p[targets[i]].max(1e-300).ln();
        }
        total / tokens.len() as f64
    };

    let (out, tape) = model.forward_train(&tokens, t).unwrap();
    let d = tokens.len() as f64;
    let dlogits: Vec<Vec<f64>> = out
        .logits
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut g = dfm_core::schedule::softmax(row);
            g[targets[i]] -= 1.0;
            g.iter_mut().for_each(|x| *x /= d);
            g
        })
        .collect();
    let analytic = model.backward(&tape, &dlogits, None).unwrap().to_flat();

    let mut flat_p = model.params.to_flat();
    let n = flat_p.len();
    let eps = 1e-5;
    let mut max_rel: f64 = 0.0;
    let mut checked = 0usize;
    for idx in (0..n).step_by((n / 300).max(1)) {
        let orig = flat_p[idx];
        flat_p[idx] = orig + eps;
        model.params.set_flat(&flat_p);
        let lp = loss(&model);
        flat_p[idx] = orig - eps;
        model.params.set_flat(&flat_p);
        let lm = loss(&model);
        flat_p[idx] = orig;
        let fd = (lp - lm) / (2.0 * eps);
        let denom = fd.abs().max(analytic[idx].abs());
        if denom > 1e-6 {
            max_rel = max_rel.max((fd - analytic[idx]).abs() / denom);
            checked += 1;
        }
    }
    model.params.set_flat(&flat_p);

    c.check(
        max_rel < 1e-4 && checked > 100,
        format!("max relative error {max_rel:.2e} (<1e-4) over {checked} probed parameters"),
    );
}

#[test]
fn c06_cfg_dropout_rate() {
    let c = Criterion::new(6, "cfg-dropout-rate");
    let mut r = rng::stream(12, "acceptance-cfg");
    let drops = plan_cfg_drops(100_000, 0.1, &mut r);
    let frac = drops.iter().filter(|&&d| d).count() as f64 / drops.len() as f64;
    c.check(
        (frac - 0.10).abs() <= 0.005,
        format!("measured drop fraction {frac:.4} (0.10 +/- 0.005)"),
    );
}

#[test]
fn c07_dynamic_length_generation() {
    let c = Criterion::new(7, "dynamic-length");
    // 70-token responses (69 content + EOS) padded to 128 for training.
    let spec = TextCorpusSpec {
        kind: TextCorpusKind::Constant,
        vocab_size: 16,
        embed_dim: 8,
        embedding_seed: 3,
        instruction_len: 4,
        response_len: 70,
        num_responses: 1,
        examples: 64,
        append_eos: true,
        pad_to_multiple: Some(64),
    };
    let corpus = make_text_corpus(&spec, 19).unwrap();
    assert_eq!(corpus.response_span(), 128);
    let schedule = metric_schedule(&corpus.vocab);
    // Room for the probe to grow to max_blocks.
    let max_len = 4 + 4 * 64;
    let model_cfg = ModelConfig {
        layers: 2,
        width: 32,
        heads: 4,
        mlp_ratio: 2,
        max_len,
        vocab_size: corpus.vocab.size(),
        cond_drop_token: dfm_core::corpus::COND_DROP,
        use_pos_embedding: true,
    };
    let mut model = TrainableDenoiser::new(model_cfg, 2).unwrap();
    let train_cfg = TrainConfig { batch_size: 8, cfg_drop_prob: 0.0, ..Default::default() };
    train_denoiser(&mut model, &corpus, &schedule, &train_cfg, 250, 23).unwrap();

    let instruction = TokenSequence::new(
        corpus.instruction.clone(),
        vec![Segment::Instruction; 4],
        &corpus.vocab,
    )
    .unwrap();

    let cfg = SamplerConfig { steps: 16, block_size: 64, max_blocks: 4, ..Default::default() };
    let mut lengths = Vec::new();
    let mut settled = 0usize;
    for seed in 0..3u64 {
        let mut pred = ModelPredictor { model: &model };
        let (out, trace) =
            dynamic_length_generate(&mut pred, &instruction, &cfg, &schedule, &corpus.vocab, 100 + seed)
                .unwrap();
        let resp_len = out.len() - 4;
        lengths.push(resp_len);
        settled = trace.settled_blocks * 64;
        assert!(!trace.truncated);
    }
    let all_multiples = lengths.iter().all(|l| l % 64 == 0);
    let settles_at_128 = lengths.iter().all(|&l| l == 128);

    // Threshold at zero: never extends.
    let tiny_theta = SamplerConfig { eos_threshold: 1e-9, ..cfg.clone() };
    let mut pred = ModelPredictor { model: &model };
    let (short, _) =
        dynamic_length_generate(&mut pred, &instruction, &tiny_theta, &schedule, &corpus.vocab, 5)
            .unwrap();
    let short_len = short.len() - 4;

    c.check(
        all_multiples && settles_at_128 && short_len == 64,
        format!(
            "lengths {lengths:?} all x64 and ==128 (settled {settled}); theta->0 gives {short_len} (==64)"
        ),
    );
}

#[test]
fn c08_mcq_quantizer() {
    let c = Criterion::new(8, "mcq-quantizer");
    use dfm_core::mcq::{
        fit_toy_modality, gaussian_mixture_corpus, kmeans_oracle_mse, quantize,
        representative_lookup, Codebook, ToyModalityConfig,
    };
    // Exhaustive nearest-neighbor agreement on 1e4 random inputs.
    let cb = Codebook::random(2, 8, 6, 13).unwrap();
    let mut r = rng::stream(21, "acceptance-mcq");
    let mut argmin_ok = true;
    for _ in 0..10_000 {
        let z: Vec<f64> = (0..6).map(|_| rng::gauss(&mut r)).collect();
        let code = quantize(&cb, &z).unwrap();
        let mut best = (usize::MAX, usize::MAX);
        let mut best_d = f64::INFINITY;
        for i in 0..8 {
            for j in 0..8 {
                let rep = representative_lookup(&cb, &[i, j]).unwrap();
                let d: f64 = z.iter().zip(&rep).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d - 1e-15 {
                    best_d = d;
                    best = (i, j);
                }
            }
        }
        argmin_ok &= code.indices == vec![best.0, best.1];
    }

    // Distortion nonincreasing in K_m and the k-means oracle bound.
    let data = gaussian_mixture_corpus(8, 64, 0.15, 11);
    let points: Vec<[f64; 2]> = data.iter().map(|(p, _)| *p).collect();
    let mut mses = Vec::new();
    for &k_m in &[16usize, 32, 64] {
        let cfg = ToyModalityConfig { m: 2, k_m, steps: 1200, ..Default::default() };
        let modality = fit_toy_modality(&points, cfg, 1).unwrap();
        mses.push(modality.reconstruction_mse(&points).unwrap());
    }
    let monotone = mses[1] <= mses[0] * 1.01 && mses[2] <= mses[1] * 1.01;
    let oracle = kmeans_oracle_mse(&points, 16, 50, 0);
    let beats_oracle = mses[0] <= 1.5 * oracle;

    c.check(
        argmin_ok && monotone && beats_oracle,
        format!(
            "argmin exact {argmin_ok}; distortion {mses:?} nonincreasing {monotone}; MSE {:.5} <= 1.5x k-means {:.5}",
            mses[0], oracle
        ),
    );
}

#[test]
fn c09_adaptive_cache_keystone() {
    let c = Criterion::new(9, "adaptive-cache");
    let vocab = Vocabulary::random(12, 8, 5, 0, 1).unwrap();
    let schedule = metric_schedule(&vocab);

    // Keystone: forced recompute is bit-identical to uncached over a full
    // generation (logits compared at every step via identical outputs).
    let small_cfg = ModelConfig {
        layers: 2,
        width: 32,
        heads: 4,
        mlp_ratio: 2,
        max_len: 40,
        vocab_size: vocab.size(),
        cond_drop_token: 2,
        use_pos_embedding: true,
    };
    let small = TrainableDenoiser::new(small_cfg, 3).unwrap();
    let instruction =
        TokenSequence::new(vec![3, 4, 5, 6], vec![Segment::Instruction; 4], &vocab).unwrap();
    let sampler_cfg = SamplerConfig { steps: 16, ..Default::default() };
    let (plain_out, plain_trace) = {
        let mut pred = ModelPredictor { model: &small };
        generate(&mut pred, &instruction, 32, &sampler_cfg, &schedule, &vocab, 55).unwrap()
    };
    let (forced_out, forced_trace) = {
        let mut pred = CachedModelPredictor::new(&small, CachePolicy { tau: 2.0, sim_layer: 0 });
        generate(&mut pred, &instruction, 32, &sampler_cfg, &schedule, &vocab, 55).unwrap()
    };
    let bit_identical =
        plain_out.tokens() == forced_out.tokens() && plain_trace.sequences == forced_trace.sequences;

    // Desk benchmark: 2-layer default model, D = 256 response, N = 64.
    let bench_cfg = ModelConfig::small(vocab.size(), 8 + 256, 2);
    let model = TrainableDenoiser::new(bench_cfg, 9).unwrap();
    let bench_instruction = TokenSequence::new(
        vec![3, 4, 5, 6, 7, 8, 9, 10],
        vec![Segment::Instruction; 8],
        &vocab,
    )
    .unwrap();
    let bench_sampler = SamplerConfig { steps: 64, ..Default::default() };
    let runs = 2;
    let mut uncached_ms = 0.0;
    let mut cached_ms = 0.0;
    let mut fraction = 0.0;
    for run in 0..runs {
        let seed = 900 + run as u64;
        let mut plain = ModelPredictor { model: &model };
        let (_, t1) = generate(&mut plain, &bench_instruction, 256, &bench_sampler, &schedule, &vocab, seed)
            .unwrap();
        uncached_ms += t1.total_ms();
        let mut cached = CachedModelPredictor::new(&model, CachePolicy { tau: 0.95, sim_layer: 0 });
        let (_, t2) = generate(&mut cached, &bench_instruction, 256, &bench_sampler, &schedule, &vocab, seed)
            .unwrap();
        cached_ms += t2.total_ms();
        fraction += cached.state().recompute_fraction();
    }
    fraction /= runs as f64;
    let ratio = uncached_ms / cached_ms;

    // The paper's reference figure for this mechanism is 1.2x; the assertion
    // here is only ratio > 1.0 (hardware-dependent).
    c.check(
        bit_identical && ratio > 1.0 && fraction < 1.0,
        format!(
            "forced-recompute bit-identical {bit_identical}; wall ratio {ratio:.2} (>1.0, reference 1.2); recompute fraction {fraction:.3} (<1)"
        ),
    );
}

#[test]
fn c10_gradnorm_balancing() {
    let c = Criterion::new(10, "gradnorm-balancing");
    let mut lambdas = vec![1.0, 1.0];
    let unweighted = [10.0, 1.0];
    let mut entered_at = None;
    for step in 0..500 {
        let weighted = [lambdas[0] * unweighted[0], lambdas[1] * unweighted[1]];
        lambdas =
            gradnorm_update(&lambdas, &weighted, &[1.0, 1.0], &[0.7, 0.7], 1.0, 0.002).unwrap();
        let ratio = (lambdas[0] * unweighted[0]) / (lambdas[1] * unweighted[1]);
        if entered_at.is_none() && (0.8..=1.25).contains(&ratio) {
            entered_at = Some(step + 1);
        }
    }
    let final_ratio = (lambdas[0] * unweighted[0]) / (lambdas[1] * unweighted[1]);
    let sum = lambdas.iter().sum::<f64>();
    c.check(
        (0.8..=1.25).contains(&final_ratio)
            && entered_at.is_some()
            && lambdas.iter().all(|&l| l > 0.0)
            && (sum - 2.0).abs() < 1e-9,
        format!(
            "weighted-norm ratio {final_ratio:.3} in [0.8, 1.25] (entered at update {:?}); lambdas {lambdas:?} sum {sum:.9}",
            entered_at
        ),
    );
}

#[test]
fn c11_retrieval_mechanism() {
    let c = Criterion::new(11, "retrieval-mrr");
    let mut cfg = ExperimentConfig::default();
    cfg.experiment.pipeline = "retrieval".into();
    cfg.experiment.seed = 17;
    let out = run_experiment(&cfg).unwrap();
    let mrr = out.report.get("mrr").unwrap();
    let baseline = out.report.get("random_baseline_mrr").unwrap();
    c.check(
        mrr > 3.0 * baseline,
        format!("MRR {mrr:.4} vs random baseline {baseline:.4} (needs > {:.4})", 3.0 * baseline),
    );
}

#[test]
fn c12_determinism() {
    let c = Criterion::new(12, "determinism");
    let mut all_ok = true;
    let mut detail = Vec::new();
    for pipeline in ["path-check", "oracle-sampling", "train-and-sample", "cache-bench", "retrieval"] {
        let mut cfg = ExperimentConfig::default();
        cfg.experiment.pipeline = pipeline.into();
        cfg.experiment.seed = 23;
        // Small sizes: determinism is size-independent.
        cfg.oracle.generations = 200;
        cfg.sampler.steps = 16;
        cfg.train.steps = 30;
        cfg.train.eval_samples = 20;
        cfg.train.eval_generations = 30;
        cfg.train.optimizer.batch_size = 8;
        cfg.cache.response_len = 16;
        cfg.cache.runs = 2;
        cfg.retrieval.corpus.pairs = 12;
        cfg.retrieval.corpus.quantizer.steps = 40;
        cfg.retrieval.dfm_steps = 4;
        cfg.retrieval.finetune_steps = 6;
        let a = run_experiment(&cfg).unwrap().report.deterministic_json();
        let b = run_experiment(&cfg).unwrap().report.deterministic_json();
        let ok = a == b;
        all_ok &= ok;
        detail.push(format!("{pipeline}:{}", if ok { "ok" } else { "MISMATCH" }));
    }
    c.check(all_ok, detail.join(" "));
}
