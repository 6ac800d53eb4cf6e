// temporary calibration probe; deleted before ship
use dfm_core::corpus::{make_text_corpus, TextCorpusKind, TextCorpusSpec};
use dfm_core::denoiser::{ModelConfig, TrainableDenoiser};
use dfm_core::experiment::train_denoiser;
use dfm_core::rng;
use dfm_core::sampler::init_response_region;
use dfm_core::schedule::PathSchedule;
use dfm_core::training::TrainConfig;
use dfm_core::vocab::{Segment, TokenSequence};

#[test]
#[ignore]
fn probe_confidences() {
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
    let schedule = PathSchedule::metric(3.0, 0.9, &corpus.vocab).unwrap();
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
    let log = train_denoiser(&mut model, &corpus, &schedule, &train_cfg, 250, 23).unwrap();
    println!("final l_ce = {:.4}", log.last().unwrap().l_ce);

    let instruction = TokenSequence::new(
        corpus.instruction.clone(),
        vec![Segment::Instruction; 4],
        &corpus.vocab,
    )
    .unwrap();
    let t_probe = 1.0 - 1.0 / 16.0;
    for blocks in 1..=2 {
        let len = blocks * 64;
        let x = init_response_region(&instruction, len, &schedule, &corpus.vocab, 99).unwrap();
        let out = model.forward(&x, t_probe, false).unwrap();
        let final_block = (4 + len - 64)..(4 + len);
        let max_eos = final_block
            .clone()
            .map(|i| out.probs(i)[corpus.vocab.eos()])
            .fold(0.0f64, f64::max);
        // Where does the model put EOS mass overall?
        let eos_profile: Vec<(usize, f64)> = (4..4 + len)
            .map(|i| (i - 4, out.probs(i)[corpus.vocab.eos()]))
            .filter(|(_, p)| *p > 0.05)
            .collect();
        println!(
            "blocks={blocks} len={len}: max EOS prob in final block = {max_eos:.4}; positions with EOS>0.05: {eos_profile:?}"
        );
        // Also check at a mid probe time for contrast.
        let out_mid = model.forward(&x, 0.5, false).unwrap();
        let max_eos_mid = final_block
            .map(|i| out_mid.probs(i)[corpus.vocab.eos()])
            .fold(0.0f64, f64::max);
        println!("  (at t=0.5 the same max EOS prob = {max_eos_mid:.4})");
    }
}
