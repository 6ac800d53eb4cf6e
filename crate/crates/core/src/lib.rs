//! Desk-scale discrete flow matching (DFM) generation engine.
//!
//! The engine models sequences of categorical tokens via time-indexed
//! probability paths from a noise distribution to a data distribution and
//! samples them with an Euler solver for the underlying continuous-time
//! Markov chain. Every stochastic component runs from named, seeded
//! sub-streams so experiments reproduce byte-for-byte.
//!
//! Module map:
//! - [`schedule`]: vocabularies, mixture and metric-induced probability paths,
//!   exact small-instance marginals.
//! - [`velocity`]: kinetic-optimal transition rates and per-coordinate jump laws.
//! - [`denoiser`]: exact Bayes posterior oracle plus a small trainable
//!   bidirectional denoiser with a hand-derived backward pass.
//! - [`sampler`]: Euler CTMC solver, classifier-free guidance, dynamic-length
//!   block generation.
//! - [`training`]: masked cross-entropy objective, multi-loss balancing with
//!   GradNorm, single-modality batch planning.
//! - [`mcq`]: multi-codebook vector quantization and the toy signal modality.
//! - [`cache`]: similarity-gated feature reuse across denoising steps.
//! - [`corpus`], [`metrics`], [`config`], [`experiment`]: synthetic data,
//!   evaluation metrics, and the experiment harness behind the CLI.

pub mod cache;
pub mod config;
pub mod corpus;
pub mod denoiser;
pub mod dist;
pub mod error;
pub mod experiment;
pub mod mcq;
pub mod metrics;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod training;
pub mod velocity;
pub mod vocab;

pub use error::{Error, Result};
