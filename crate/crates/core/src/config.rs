//! Experiment configuration: one human-readable TOML file per experiment,
//! hash-stable and diffable. Every knob has an explicit default; the
//! checked-in reference config spells all of them out.

use crate::cache::CachePolicy;
use crate::corpus::{PairedCorpusSpec, TextCorpusSpec};
use crate::error::{Error, Result};
use crate::sampler::SamplerConfig;
use crate::schedule::{BaseDistribution, KappaSchedule, PathSchedule};
use crate::training::TrainConfig;
use crate::vocab::Vocabulary;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSection {
    pub pipeline: String,
    pub seed: u64,
    pub out_dir: String,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self { pipeline: "path-check".into(), seed: 42, out_dir: "runs".into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabSection {
    pub size: usize,
    pub embed_dim: usize,
    pub embedding_seed: u64,
    pub pad_id: usize,
    pub eos_id: usize,
}

impl Default for VocabSection {
    fn default() -> Self {
        Self { size: 6, embed_dim: 8, embedding_seed: 7, pad_id: 0, eos_id: 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleSection {
    /// "mixture" or "metric".
    pub kind: String,
    /// Metric path constants.
    pub c: f64,
    pub a: f64,
    /// Mixture schedule: "linear" or a power exponent.
    pub kappa: String,
    pub kappa_power: f64,
    /// Mixture base: "uniform" or "mask".
    pub base: String,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            kind: "metric".into(),
            c: 3.0,
            a: 0.9,
            kappa: "linear".into(),
            kappa_power: 2.0,
            base: "uniform".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub use_pos_embedding: bool,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { layers: 2, width: 64, heads: 4, mlp_ratio: 4, use_pos_embedding: true, init_seed: 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CacheSection {
    pub tau: f64,
    pub sim_layer: usize,
    /// Sweep for `bench cache`.
    pub taus: Vec<f64>,
    pub runs: usize,
    pub response_len: usize,
}

impl Default for CacheSection {
    fn default() -> Self {
        Self { tau: 0.95, sim_layer: 0, taus: vec![0.9, 0.95, 0.99], runs: 4, response_len: 256 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleSection {
    pub generations: usize,
    pub tv_threshold: f64,
    /// Also run the doubled-step-count convergence check.
    pub double_steps_check: bool,
    pub posterior_cap: usize,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            generations: 20_000,
            tv_threshold: 0.05,
            double_steps_check: false,
            posterior_cap: 100_000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    #[serde(flatten)]
    pub optimizer: TrainConfig,
    pub steps: usize,
    /// Evaluation sample count for the CE-vs-entropy and TV checks.
    pub eval_samples: usize,
    pub eval_generations: usize,
    pub ce_gap_threshold: f64,
    pub tv_threshold: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            optimizer: TrainConfig::default(),
            steps: 800,
            eval_samples: 512,
            eval_generations: 2000,
            ce_gap_threshold: 0.1,
            tv_threshold: 0.15,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantizeSection {
    #[serde(flatten)]
    pub quantizer: crate::mcq::ToyModalityConfig,
    pub components: usize,
    pub per_component: usize,
    pub spread: f64,
    pub corpus_seed: u64,
}

impl Default for QuantizeSection {
    fn default() -> Self {
        Self {
            quantizer: crate::mcq::ToyModalityConfig::default(),
            components: 8,
            per_component: 64,
            spread: 0.15,
            corpus_seed: 11,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalSection {
    #[serde(flatten)]
    pub corpus: PairedCorpusSpec,
    pub dfm_steps: usize,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub temperature: f64,
    pub mrr_over_random_threshold: f64,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self {
            corpus: PairedCorpusSpec::default(),
            dfm_steps: 120,
            finetune_steps: 150,
            finetune_lr: 0.02,
            temperature: 0.1,
            mrr_over_random_threshold: 3.0,
        }
    }
}

/// The complete experiment description.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub vocab: VocabSection,
    pub schedule: ScheduleSection,
    pub model: ModelSection,
    pub sampler: SamplerConfig,
    pub cache: CacheSection,
    pub corpus: TextCorpusSpec,
    pub train: TrainSection,
    pub oracle: OracleSection,
    pub quantize: QuantizeSection,
    pub retrieval: RetrievalSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization cannot fail")
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        match self.schedule.kind.as_str() {
            "mixture" | "metric" => {}
            other => return Err(Error::Config(format!("unknown schedule kind '{other}'"))),
        }
        match self.schedule.base.as_str() {
            "uniform" | "mask" => {}
            other => return Err(Error::Config(format!("unknown base distribution '{other}'"))),
        }
        match self.schedule.kappa.as_str() {
            "linear" | "power" => {}
            other => return Err(Error::Config(format!("unknown kappa schedule '{other}'"))),
        }
        Ok(())
    }

    /// Canonical content hash: FNV-1a over the round-tripped TOML.
    pub fn hash(&self) -> String {
        format!("{:016x}", crate::rng::fnv1a(self.to_toml_string().as_bytes()))
    }

    pub fn build_vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::random(
            self.vocab.size,
            self.vocab.embed_dim,
            self.vocab.embedding_seed,
            self.vocab.pad_id,
            self.vocab.eos_id,
        )
    }

    pub fn build_schedule(&self, vocab: &Vocabulary) -> Result<PathSchedule> {
        match self.schedule.kind.as_str() {
            "metric" => PathSchedule::metric(self.schedule.c, self.schedule.a, vocab),
            "mixture" => {
                let kappa = match self.schedule.kappa.as_str() {
                    "linear" => KappaSchedule::Linear,
                    "power" => KappaSchedule::Power(self.schedule.kappa_power),
                    other => return Err(Error::Config(format!("unknown kappa '{other}'"))),
                };
                let base = match self.schedule.base.as_str() {
                    "uniform" => BaseDistribution::Uniform,
                    "mask" => BaseDistribution::Mask,
                    other => return Err(Error::Config(format!("unknown base '{other}'"))),
                };
                Ok(PathSchedule::mixture(kappa, base))
            }
            other => Err(Error::Config(format!("unknown schedule kind '{other}'"))),
        }
    }

    pub fn build_model(&self, vocab_size: usize, max_len: usize) -> Result<crate::denoiser::TrainableDenoiser> {
        let cfg = crate::denoiser::ModelConfig {
            layers: self.model.layers,
            width: self.model.width,
            heads: self.model.heads,
            mlp_ratio: self.model.mlp_ratio,
            max_len,
            vocab_size,
            cond_drop_token: crate::corpus::COND_DROP,
            use_pos_embedding: self.model.use_pos_embedding,
        };
        crate::denoiser::TrainableDenoiser::new(cfg, crate::rng::derive(self.experiment.seed, "model-init") ^ self.model.init_seed)
    }

    pub fn cache_policy(&self) -> CachePolicy {
        CachePolicy { tau: self.cache.tau, sim_layer: self.cache.sim_layer }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_losslessly() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg.to_toml_string(), back.to_toml_string());
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            [experiment]
            pipeline = "oracle-sampling"
            seed = 9

            [schedule]
            kind = "mixture"
            base = "mask"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.experiment.pipeline, "oracle-sampling");
        assert_eq!(cfg.experiment.seed, 9);
        assert_eq!(cfg.schedule.base, "mask");
        assert_eq!(cfg.sampler.steps, 64);
    }

    #[test]
    fn invalid_kind_rejected() {
        assert!(ExperimentConfig::from_toml_str("[schedule]\nkind = \"gaussian\"\n").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = ExperimentConfig::default();
        b.experiment.seed = 43;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn builds_components() {
        let cfg = ExperimentConfig::default();
        let vocab = cfg.build_vocabulary().unwrap();
        assert_eq!(vocab.size(), 6);
        let schedule = cfg.build_schedule(&vocab).unwrap();
        assert!(schedule.is_metric());
        let model = cfg.build_model(vocab.size(), 16).unwrap();
        assert_eq!(model.cfg.width, 64);
    }
}
