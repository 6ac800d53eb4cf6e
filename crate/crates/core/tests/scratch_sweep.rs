// temporary calibration probe; deleted before ship
use dfm_core::corpus::{make_text_corpus, TextCorpusKind, TextCorpusSpec};
use dfm_core::denoiser::{ModelConfig, TrainableDenoiser};
use dfm_core::experiment::{ce_entropy_gap, train_denoiser};
use dfm_core::schedule::PathSchedule;
use dfm_core::training::TrainConfig;

#[test]
#[ignore]
fn sweep() {
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
    let corpus = make_text_corpus(&spec, 41).unwrap();
    let q = corpus.q.clone().unwrap();
    let schedule = PathSchedule::metric(3.0, 0.9, &corpus.vocab).unwrap();

    for (lr, steps, batch, width, momentum) in [
        (1e-1, 2500, 32, 64, 0.9),
        (8e-2, 2500, 32, 64, 0.9),
        (12e-2, 2500, 32, 64, 0.9),
    ] {
        let model_cfg = ModelConfig {
            width,
            heads: 4,
            ..ModelConfig::small(corpus.vocab.size(), 7, dfm_core::corpus::COND_DROP)
        };
        let mut model = TrainableDenoiser::new(model_cfg, 5).unwrap();
        let train_cfg = TrainConfig {
            batch_size: batch,
            cfg_drop_prob: 0.0,
            learning_rate: lr,
            momentum,
            ..Default::default()
        };
        let log = train_denoiser(&mut model, &corpus, &schedule, &train_cfg, steps, 6).unwrap();
        let (ce, h) = ce_entropy_gap(&model, &q, &corpus, &schedule, 200, 100_000, 9).unwrap();
        println!(
            "lr={lr:.0e} steps={steps} batch={batch} width={width} m={momentum}: l_ce(final batch)={:.4} eval_ce={ce:.4} oracle_h={h:.4} gap={:.4}",
            log.last().unwrap().l_ce,
            ce - h
        );
        // Per-t-bin diagnostics.
        use dfm_core::rng;
        use dfm_core::training::dfm_ce_loss;
        use dfm_core::denoiser::oracle_posterior;
        let mut r = rng::stream(9, "diag");
        let mut bins = vec![(0.0f64, 0.0f64, 0usize); 10];
        for _ in 0..1000 {
            let pick = (rng::uniform_f64(&mut r) * 8.0) as usize % 8;
            let x1 = dfm_core::vocab::TokenSequence::new(
                q.support()[pick].clone(),
                corpus.examples[0].x1.segments().to_vec(),
                &corpus.vocab,
            )
            .unwrap();
            let t = rng::uniform_f64(&mut r);
            let x_t = schedule.corrupt_response(&corpus.vocab, &x1, t, &mut r).unwrap();
            let out = model.forward(&x_t, t, false).unwrap();
            let ce = dfm_ce_loss(&out, &x1).unwrap();
            let oracle = oracle_posterior(&q, &schedule, &corpus.vocab, &x_t, t, 100_000).unwrap();
            let mut hh = 0.0;
            for i in x1.response_positions() {
                let p = oracle.probs(i);
                hh -= p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>();
            }
            hh /= 6.0;
            let bin = ((t * 10.0) as usize).min(9);
            bins[bin].0 += ce;
            bins[bin].1 += hh;
            bins[bin].2 += 1;
        }
        for (i, (ce, hh, n)) in bins.iter().enumerate() {
            println!(
                "t in [{:.1},{:.1}): model_ce={:.4} oracle_h={:.4} gap={:.4} (n={n})",
                i as f64 / 10.0,
                (i + 1) as f64 / 10.0,
                ce / *n as f64,
                hh / *n as f64,
                (ce - hh) / *n as f64
            );
        }
    }
}
