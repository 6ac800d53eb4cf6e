//! Command-line surface for the discrete flow matching engine.
//!
//! Every subcommand reads one TOML experiment config, runs fully seeded, and
//! writes machine-readable outputs (JSON reports, JSONL traces, CSV curves).
//! With `--assert`, any failed `pass_*` check exits nonzero.

use clap::{Args, Parser, Subcommand};
use dfm_core::config::ExperimentConfig;
use dfm_core::denoiser::checkpoint::{model_from_tensors, TensorSet};
use dfm_core::denoiser::ModelConfig;
use dfm_core::error::{Error, Result};
use dfm_core::experiment::{self, run_experiment, TrainLogRow};
use dfm_core::mcq::{fit_toy_modality, gaussian_mixture_corpus, ToyModality};
use dfm_core::metrics::MetricReport;
use dfm_core::sampler::write_trace_jsonl;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "dfm", version, about = "Desk-scale discrete flow matching engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Probability-path checks.
    Paths {
        #[command(subcommand)]
        cmd: PathsCmd,
    },
    /// Euler CTMC sampling.
    Sample {
        #[command(subcommand)]
        cmd: SampleCmd,
    },
    /// Denoiser training.
    Train {
        #[command(subcommand)]
        cmd: TrainCmd,
    },
    /// Multi-codebook quantizer.
    Quantize {
        #[command(subcommand)]
        cmd: QuantizeCmd,
    },
    /// Benchmarks.
    Bench {
        #[command(subcommand)]
        cmd: BenchCmd,
    },
    /// Retrieval evaluation.
    Retrieve {
        #[command(subcommand)]
        cmd: RetrieveCmd,
    },
    /// Report tooling.
    Report {
        #[command(subcommand)]
        cmd: ReportCmd,
    },
}

#[derive(Args)]
struct CommonRun {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Write the metric report here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit nonzero if any pass_* check fails.
    #[arg(long)]
    assert: bool,
}

#[derive(Subcommand)]
enum PathsCmd {
    /// Run the path-correctness pipeline.
    Check(CommonRun),
}

#[derive(Subcommand)]
enum SampleCmd {
    /// One seeded generation with a JSONL trace; without --ckpt the exact
    /// posterior oracle plays the denoiser.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        /// JSONL trace output path.
        #[arg(long)]
        trace: PathBuf,
        /// Trained model checkpoint; enables model-driven sampling.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Dynamic-length block generation (requires --ckpt).
        #[arg(long)]
        dynamic: bool,
    },
}

#[derive(Subcommand)]
enum TrainCmd {
    /// Train the denoiser per the config's train-and-sample pipeline.
    Denoiser {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Training log CSV (step, losses, lambdas, grad norms).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        assert: bool,
    },
}

#[derive(Subcommand)]
enum QuantizeCmd {
    /// Fit the toy quantizer on the configured Gaussian mixture.
    Fit {
        #[arg(long)]
        config: PathBuf,
        /// Codebook/codec checkpoint output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Encode 2D points (CSV `x,y` per line) into token JSONL.
    Encode {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Codec checkpoint from `quantize fit`; refits from config when absent.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Cached-vs-uncached generation benchmark over a tau sweep.
    Cache {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated tau values (overrides the config sweep).
        #[arg(long)]
        taus: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        assert: bool,
    },
}

#[derive(Subcommand)]
enum RetrieveCmd {
    /// EOS-feature retrieval on the paired corpus.
    Eval(CommonRun),
}

#[derive(Subcommand)]
enum ReportCmd {
    /// Print a summary table of metric reports.
    Summarize {
        /// Report JSON files.
        files: Vec<PathBuf>,
        /// Exit nonzero if any loaded report has a failed pass_* check.
        #[arg(long)]
        assert: bool,
    },
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
}

fn failed_checks(report: &MetricReport) -> Vec<String> {
    report
        .metrics
        .iter()
        .chain(report.timing.iter())
        .filter(|(k, &v)| k.starts_with("pass_") && v == 0.0)
        .map(|(k, _)| k.clone())
        .collect()
}

fn write_report(report: &MetricReport, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, report.to_json())?;
    println!("report written to {}", path.display());
    Ok(())
}

fn finish(report: &MetricReport, out: Option<&Path>, do_assert: bool) -> Result<i32> {
    println!("{}", report.to_json());
    if let Some(path) = out {
        write_report(report, path)?;
    }
    if do_assert {
        let failed = failed_checks(report);
        if !failed.is_empty() {
            eprintln!("failed checks: {failed:?}");
            return Ok(1);
        }
    }
    Ok(0)
}

fn run_pipeline(common: &CommonRun, pipeline: &str) -> Result<i32> {
    let mut config = ExperimentConfig::load(&common.config)?;
    config.experiment.pipeline = pipeline.to_string();
    let out = run_experiment(&config)?;
    finish(&out.report, common.out.as_deref(), common.assert)
}

fn write_train_log(rows: &[TrainLogRow], path: &Path) -> Result<()> {
    let mut text = String::from("step,l_ce,l_rec_sig,l_rec_aux,lambda1,lambda2,lambda3,grad_norm\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.step, r.l_ce, r.l_rec_sig, r.l_rec_aux, r.lambda1, r.lambda2, r.lambda3, r.grad_norm
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn load_model(config: &ExperimentConfig, ckpt: &Path) -> Result<dfm_core::denoiser::TrainableDenoiser> {
    let set = TensorSet::load(ckpt)?;
    // Infer sequence capacity and vocabulary from the stored embeddings.
    let (pos_shape, _) = set
        .get("pos_emb")
        .ok_or_else(|| Error::Serde("checkpoint missing pos_emb".into()))?;
    let (tok_shape, _) = set
        .get("tok_emb")
        .ok_or_else(|| Error::Serde("checkpoint missing tok_emb".into()))?;
    let cfg = ModelConfig {
        layers: config.model.layers,
        width: config.model.width,
        heads: config.model.heads,
        mlp_ratio: config.model.mlp_ratio,
        max_len: pos_shape[0],
        vocab_size: tok_shape[0],
        cond_drop_token: dfm_core::corpus::COND_DROP,
        use_pos_embedding: config.model.use_pos_embedding,
    };
    model_from_tensors(cfg, &set)
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Paths { cmd: PathsCmd::Check(common) } => run_pipeline(&common, "path-check"),

        Command::Sample { cmd: SampleCmd::Run { config, seed, trace, ckpt, dynamic } } => {
            let cfg = ExperimentConfig::load(&config)?;
            let model = ckpt.as_deref().map(|p| load_model(&cfg, p)).transpose()?;
            let (out, gen_trace) = match (&model, dynamic) {
                (Some(m), true) => experiment::sample_dynamic(&cfg, seed, m)?,
                (Some(m), false) => experiment::sample_once(&cfg, seed, Some(m))?,
                (None, true) => {
                    return Err(Error::Config("--dynamic requires --ckpt".into()));
                }
                (None, false) => experiment::sample_once(&cfg, seed, None)?,
            };
            let file = std::fs::File::create(&trace)?;
            write_trace_jsonl(&gen_trace, file)?;
            println!(
                "{}",
                serde_json::json!({
                    "tokens": out.tokens(),
                    "steps": gen_trace.steps.len(),
                    "jumps": gen_trace.total_jumps(),
                    "settled_blocks": gen_trace.settled_blocks,
                    "truncated": gen_trace.truncated,
                    "trace": trace.display().to_string(),
                })
            );
            Ok(0)
        }

        Command::Train { cmd: TrainCmd::Denoiser { config, out, log, assert } } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            cfg.experiment.pipeline = "train-and-sample".into();
            let result = run_experiment(&cfg)?;
            if let Some(set) = &result.artifacts.checkpoint {
                if let Some(parent) = out.parent() {
                    if !parent.as_os_str().is_empty() {
                        std::fs::create_dir_all(parent)?;
                    }
                }
                set.save(&out)?;
                println!("checkpoint written to {}", out.display());
            }
            if let Some(log_path) = log {
                write_train_log(&result.artifacts.train_log, &log_path)?;
                println!("training log written to {}", log_path.display());
            }
            finish(&result.report, None, assert)
        }

        Command::Quantize { cmd } => match cmd {
            QuantizeCmd::Fit { config, out } => {
                let cfg = ExperimentConfig::load(&config)?;
                let modality = fit_from_config(&cfg)?;
                let data = gaussian_mixture_corpus(
                    cfg.quantize.components,
                    cfg.quantize.per_component,
                    cfg.quantize.spread,
                    cfg.quantize.corpus_seed,
                );
                let points: Vec<[f64; 2]> = data.iter().map(|(p, _)| *p).collect();
                let mse = modality.reconstruction_mse(&points)?;
                println!(
                    "{}",
                    serde_json::json!({
                        "reconstruction_mse": mse,
                        "flat_vocab_size": modality.codebook.flat_vocab_size(),
                    })
                );
                if let Some(path) = out {
                    modality.to_tensors().save(&path)?;
                    println!("codec checkpoint written to {}", path.display());
                }
                Ok(0)
            }
            QuantizeCmd::Encode { config, input, out, ckpt } => {
                let cfg = ExperimentConfig::load(&config)?;
                let modality = match ckpt {
                    Some(path) => ToyModality::from_tensors(
                        cfg.quantize.quantizer.clone(),
                        &TensorSet::load(&path)?,
                    )?,
                    None => fit_from_config(&cfg)?,
                };
                let text = std::fs::read_to_string(&input)?;
                let mut lines = Vec::new();
                for (lineno, line) in text.lines().enumerate() {
                    let line = line.trim();
                    if line.is_empty() || line.starts_with('#') {
                        continue;
                    }
                    let parts: Vec<&str> = line.split(',').map(str::trim).collect();
                    if parts.len() != 2 {
                        return Err(Error::Config(format!(
                            "line {}: expected 'x,y', got '{line}'",
                            lineno + 1
                        )));
                    }
                    let x: f64 = parts[0]
                        .parse()
                        .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
                    let y: f64 = parts[1]
                        .parse()
                        .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
                    let tokens = modality.encode_point_tokens(&[x, y])?;
                    let decoded = modality.decode_point_tokens(&tokens)?;
                    lines.push(
                        serde_json::json!({
                            "point": [x, y],
                            "tokens": tokens,
                            "reconstruction": decoded,
                        })
                        .to_string(),
                    );
                }
                std::fs::write(&out, lines.join("\n") + "\n")?;
                println!("encoded {} points to {}", lines.len(), out.display());
                Ok(0)
            }
        },

        Command::Bench { cmd: BenchCmd::Cache { config, taus, out, assert } } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            cfg.experiment.pipeline = "cache-bench".into();
            if let Some(list) = taus {
                cfg.cache.taus = list
                    .split(',')
                    .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Config(e.to_string())))
                    .collect::<Result<Vec<f64>>>()?;
            }
            let result = run_experiment(&cfg)?;
            let payload = serde_json::json!({
                "report": result.report,
                "sweeps": result.artifacts.speedups,
            });
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            std::fs::write(&out, serde_json::to_string_pretty(&payload)?)?;
            println!("benchmark written to {}", out.display());
            finish(&result.report, None, assert)
        }

        Command::Retrieve { cmd: RetrieveCmd::Eval(common) } => run_pipeline(&common, "retrieval"),

        Command::Report { cmd: ReportCmd::Summarize { files, assert } } => {
            let mut any_failed = false;
            println!("{:<18} {:<18} {:>6}  metrics", "pipeline", "config", "seed");
            for path in &files {
                let text = std::fs::read_to_string(path)?;
                let report: MetricReport = serde_json::from_str(&text)?;
                let failed = failed_checks(&report);
                any_failed |= !failed.is_empty();
                let mut pairs: Vec<String> = report
                    .metrics
                    .iter()
                    .filter(|(k, _)| !k.starts_with("pass_"))
                    .map(|(k, v)| format!("{k}={v:.5}"))
                    .collect();
                pairs.sort();
                println!(
                    "{:<18} {:<18} {:>6}  {}{}",
                    report.pipeline,
                    report.config_hash,
                    report.seed,
                    pairs.join(" "),
                    if failed.is_empty() { String::new() } else { format!("  FAILED: {failed:?}") }
                );
            }
            Ok(if assert && any_failed { 1 } else { 0 })
        }
    }
}

fn fit_from_config(cfg: &ExperimentConfig) -> Result<ToyModality> {
    let data = gaussian_mixture_corpus(
        cfg.quantize.components,
        cfg.quantize.per_component,
        cfg.quantize.spread,
        cfg.quantize.corpus_seed,
    );
    let points: Vec<[f64; 2]> = data.iter().map(|(p, _)| *p).collect();
    fit_toy_modality(&points, cfg.quantize.quantizer.clone(), cfg.experiment.seed)
}
