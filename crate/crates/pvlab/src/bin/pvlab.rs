//! Command-line entry point: thin wrappers over the pipeline stages.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, bad config, missing
//! artifacts), 2 runtime error.

use clap::{Args, Parser, Subcommand};
use pvlab::decompose::{decompose, load_banks, save_banks, StreamId, StreamRequest};
use pvlab::harness::{HarnessError, Pipeline, RunConfig, WindowSampler};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "pvlab",
    about = "Train small transformer variants, decompose their hidden states into positional and semantic components, and evaluate training-free context-window extension",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration file (INI-like; see README for the grammar).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured model variants (cached by content hash).
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Train only this variant.
        #[arg(long)]
        variant: Option<String>,
        /// Override the training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Where to copy the resulting checkpoint(s), besides the cache.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Collect hidden-state banks (64-bit running sums) into a .pvbnk file.
    Bank {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        variant: Option<String>,
        /// Window length (defaults to the configured bank_len).
        #[arg(long)]
        len: Option<usize>,
        /// Number of windows (defaults to the configured bank_samples).
        #[arg(long)]
        samples: Option<usize>,
        /// Streams: layer-outputs | values | qk:<layer> | all
        #[arg(long, default_value = "layer-outputs")]
        streams: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decompose a bank file into positional vectors (.pvdec).
    Decompose {
        /// A .pvbnk file produced by `bank`.
        #[arg(long)]
        bank: PathBuf,
        /// Context window for the mean vector (defaults to the bank length).
        #[arg(long)]
        c: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one analysis and emit its CSV (and SVG where defined).
    Analyze {
        #[command(flatten)]
        config: ConfigArg,
        /// pca | distinct-count | ablation | attention-maps | extrapolation |
        /// ood-logits | synthetic
        #[arg(long)]
        which: String,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        layer: Option<usize>,
        /// Extra key=value parameters for the analysis.
        #[arg(long = "param")]
        params: Vec<String>,
    },
    /// Evaluate a context-window extension method.
    ExtendEval {
        #[command(flatten)]
        config: ConfigArg,
        /// pvr | awe | attn-scale | init-scale | dynamic-ntk
        #[arg(long)]
        method: String,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        r: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        eval_len: Option<usize>,
    },
    /// Run the full declared pipeline and write the report + manifest.
    Report {
        #[command(flatten)]
        config: ConfigArg,
    },
}

fn entry_from_params(
    kind: &str,
    name: &str,
    model: Option<String>,
    pairs: Vec<(String, Option<String>)>,
) -> pvlab::harness::ExperimentEntry {
    let mut params = std::collections::BTreeMap::new();
    if let Some(m) = model {
        params.insert("model".to_string(), m);
    }
    for (k, v) in pairs {
        if let Some(v) = v {
            params.insert(k, v);
        }
    }
    pvlab::harness::ExperimentEntry { kind: kind.to_string(), name: name.to_string(), params }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Train { config, variant, seed, out } => {
            let mut cfg = RunConfig::load(&config.config)?;
            if let Some(s) = seed {
                cfg.training.seed = s;
            }
            let names: Vec<String> = match variant {
                Some(v) => vec![v],
                None => cfg.variants.iter().map(|(n, _)| n.clone()).collect(),
            };
            let pipeline = Pipeline::new(cfg)?;
            for name in names {
                let model = pipeline.train_variant(&name)?;
                println!(
                    "trained {name}: {} parameters, cache key {}",
                    model.params().len(),
                    pipeline.train_key(&name)?.short()
                );
                if let Some(dir) = &out {
                    std::fs::create_dir_all(dir)?;
                    let path = dir.join(format!("{name}.pvlab"));
                    model.save_checkpoint(&path)?;
                    println!("wrote {}", path.display());
                }
            }
            Ok(())
        }
        Command::Bank { config, variant, len, samples, streams, out } => {
            let cfg = RunConfig::load(&config.config)?;
            let pipeline = Pipeline::new(cfg)?;
            let vname = variant.unwrap_or_else(|| pipeline.config().variants[0].0.clone());
            let mcfg = pipeline
                .config()
                .variant(&vname)
                .ok_or_else(|| HarnessError::Validation(format!("unknown variant {vname}")))?
                .clone();
            let model = pipeline.train_variant(&vname)?;
            let t_len = len.unwrap_or(pipeline.config().data.bank_len);
            let n = samples.unwrap_or(pipeline.config().data.bank_samples);
            let ids: Vec<StreamId> = match streams.as_str() {
                "layer-outputs" => {
                    (1..=mcfg.layers).map(|l| StreamId::LayerOutput { layer: l }).collect()
                }
                "values" => (1..=mcfg.layers)
                    .flat_map(|l| {
                        (1..=mcfg.heads).map(move |h| StreamId::Value { layer: l, head: h })
                    })
                    .collect(),
                "all" => {
                    let mut v: Vec<StreamId> =
                        (1..=mcfg.layers).map(|l| StreamId::LayerOutput { layer: l }).collect();
                    for l in 1..=mcfg.layers {
                        for h in 1..=mcfg.heads {
                            v.push(StreamId::Query { layer: l, head: h });
                            v.push(StreamId::Key { layer: l, head: h });
                            v.push(StreamId::Value { layer: l, head: h });
                        }
                    }
                    v
                }
                other => match other.strip_prefix("qk:") {
                    Some(l) => {
                        let layer: usize = l
                            .parse()
                            .map_err(|_| HarnessError::Validation(format!("bad qk layer {l}")))?;
                        (1..=mcfg.heads)
                            .flat_map(|h| {
                                [
                                    StreamId::Query { layer, head: h },
                                    StreamId::Key { layer, head: h },
                                ]
                            })
                            .collect()
                    }
                    None => {
                        return Err(HarnessError::Validation(format!(
                            "unknown stream selection {other}"
                        )))
                    }
                },
            };
            let sampler =
                WindowSampler::new(pipeline.train_tokens(), pipeline.config().data.sampler_seed);
            let requests: Vec<StreamRequest> =
                ids.iter().map(|s| StreamRequest::mean_only(*s)).collect();
            let banks =
                pvlab::decompose::collect_bank(model.as_ref(), &sampler, n, t_len, &requests, &[])?;
            if let Some(dir) = out.parent() {
                std::fs::create_dir_all(dir)?;
            }
            save_banks(&out, &banks)?;
            println!("wrote {} ({} streams, n={n}, t={t_len})", out.display(), banks.len());
            Ok(())
        }
        Command::Decompose { bank, c, out } => {
            let banks = load_banks(&bank)?;
            if banks.is_empty() {
                return Err(HarnessError::Validation(format!(
                    "{} holds no banks",
                    bank.display()
                )));
            }
            let c = c.unwrap_or_else(|| banks[0].t_len());
            let mut set = pvlab::decompose::DecompositionSet::new();
            for b in &banks {
                set.insert(decompose(b, c)?);
            }
            if let Some(dir) = out.parent() {
                std::fs::create_dir_all(dir)?;
            }
            set.save(&out)?;
            println!("wrote {} ({} streams, c={c})", out.display(), set.len());
            Ok(())
        }
        Command::Analyze { config, which, model, layer, params } => {
            let cfg = RunConfig::load(&config.config)?;
            let pipeline = Pipeline::new(cfg)?;
            let mut pairs: Vec<(String, Option<String>)> =
                vec![("layer".to_string(), layer.map(|l| l.to_string()))];
            for p in params {
                let (k, v) = p.split_once('=').ok_or_else(|| {
                    HarnessError::Validation(format!("--param {p} is not key=value"))
                })?;
                pairs.push((k.to_string(), Some(v.to_string())));
            }
            let entry = entry_from_params("analysis", &which, model, pairs);
            let mut report = pvlab::harness::ExperimentReport::default();
            pipeline.run_one(&entry, &mut report)?;
            for a in &report.artifacts {
                println!("wrote {}", a.display());
            }
            Ok(())
        }
        Command::ExtendEval { config, method, model, r, alpha, lambda, layer, eval_len } => {
            let cfg = RunConfig::load(&config.config)?;
            let pipeline = Pipeline::new(cfg)?;
            let pairs = vec![
                ("r".to_string(), r.map(|v| v.to_string())),
                ("alpha".to_string(), alpha.map(|v| v.to_string())),
                ("lambda".to_string(), lambda.map(|v| v.to_string())),
                ("layer".to_string(), layer.map(|v| v.to_string())),
                ("eval_len".to_string(), eval_len.map(|v| v.to_string())),
            ];
            let entry = entry_from_params("extend", &method, model, pairs);
            let mut report = pvlab::harness::ExperimentReport::default();
            pipeline.run_one(&entry, &mut report)?;
            for a in &report.artifacts {
                println!("wrote {}", a.display());
            }
            for (name, value) in &report.summary {
                println!("{name} = {value}");
            }
            Ok(())
        }
        Command::Report { config } => {
            let cfg = RunConfig::load(&config.config)?;
            let out_dir = cfg.out_dir.clone();
            let pipeline = Pipeline::new(cfg)?;
            let report = pipeline.run()?;
            println!("manifest: {}", out_dir.join("manifest.txt").display());
            for a in &report.artifacts {
                println!("wrote {}", a.display());
            }
            for (stage, err) in &report.failures {
                eprintln!("stage failed: {stage}: {err}");
            }
            if report.failures.is_empty() {
                Ok(())
            } else {
                Err(HarnessError::Validation(format!(
                    "{} stage(s) failed; see manifest",
                    report.failures.len()
                )))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's rendered help/usage text, but with this tool's exit-code
            // contract: usage problems are validation errors (1)
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
