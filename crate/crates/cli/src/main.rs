//! `tunelab`: pretrain the desk model, run fine-tuning cells or the full
//! beta x rho grid, and inspect checkpoints.
//!
//! Configuration comes from a TOML file (`--config`); command-line flags
//! override the file, which overrides built-in defaults.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use tunelab_core::checkpoint::{file_hash, load_adapter, load_base, save_base, Meta};
use tunelab_core::data::{pack_corpus, read_corpus_dir, tokenize, CorpusWindow};
use tunelab_core::experiments::{desk_probes, desk_sft_dataset, Precision};
use tunelab_core::grid::{run_grid, RunConfig};
use tunelab_core::model::{LoraAdapter, Params};
use tunelab_core::objective::kl_quadratic_check;
use tunelab_core::rng::stream;

#[derive(Parser)]
#[command(name = "tunelab", about = "desk-scale continual fine-tuning laboratory")]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Default)]
struct TrainFlags {
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    kl_on_replay: Option<bool>,
}

impl TrainFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        let f = &mut cfg.finetune;
        if let Some(x) = self.beta {
            f.beta = x;
        }
        if let Some(x) = self.rho {
            f.rho = x;
        }
        if let Some(x) = self.lr {
            f.lr = x;
        }
        if let Some(x) = self.batch {
            f.batch = x;
        }
        if let Some(x) = self.window {
            f.window = x;
        }
        if let Some(x) = self.steps {
            f.steps = x;
        }
        if let Some(x) = self.seed {
            f.seed = x;
        }
        if let Some(x) = self.kl_on_replay {
            f.kl_on_replay = x;
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the base model from scratch on the pretraining corpus.
    Pretrain {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output checkpoint path.
        #[arg(long, default_value = "base.ckpt")]
        out: PathBuf,
    },
    /// Fine-tune a LoRA adapter against a base checkpoint.
    Finetune {
        #[arg(long)]
        base: PathBuf,
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long, default_value = "adapter.ckpt")]
        out: PathBuf,
    },
    /// Run the full beta x rho grid and write CSV reports.
    Grid {
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Score the probe suite for a base model, optionally with an adapter.
    Evaluate {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapter: Option<PathBuf>,
    },
    /// Merge an adapter into its base and write a plain base checkpoint.
    Merge {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapter: PathBuf,
        #[arg(long, default_value = "merged.ckpt")]
        out: PathBuf,
    },
    /// Compare measured KL drift against the Fisher quadratic prediction.
    FisherCheck {
        #[arg(long)]
        base: PathBuf,
        /// Direction adapter; a random one is used when omitted.
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.05,0.025")]
        eps: Vec<f64>,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the summary of a finished grid run.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn load_adapter_for(
    base_path: &Path,
    base: &Params<f32>,
    adapter_path: &Path,
) -> Result<LoraAdapter<f32>> {
    let ckpt = load_adapter(adapter_path)?;
    let hash = file_hash(base_path)?;
    if ckpt.base_hash != hash {
        bail!(
            "adapter {} was trained against a different base checkpoint",
            adapter_path.display()
        );
    }
    if ckpt.config != base.config {
        bail!("adapter/base model configuration mismatch");
    }
    Ok(ckpt.adapter)
}

fn replay_windows(cfg: &RunConfig) -> Result<Vec<CorpusWindow>> {
    let corpus = tokenize(&read_corpus_dir(Path::new(&cfg.data.replay_dir))?);
    Ok(pack_corpus(&corpus, cfg.finetune.window + 1)?)
}

fn print_scores(names: &[String], scores: &[f64]) {
    for (n, s) in names.iter().zip(scores) {
        println!("{n:>8}: {s:6.2}");
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = load_config(&cli.config)?;
    match cli.cmd {
        Cmd::Pretrain {
            steps,
            lr,
            batch,
            seed,
            out,
        } => {
            if let Some(x) = steps {
                cfg.pretrain.steps = x;
            }
            if let Some(x) = lr {
                cfg.pretrain.lr = x;
            }
            if let Some(x) = batch {
                cfg.pretrain.batch = x;
            }
            let corpus = tokenize(&read_corpus_dir(Path::new(&cfg.data.pretrain_dir))?);
            let outcome = tunelab_core::experiments::pretrain(
                &cfg.model_config(),
                &corpus,
                cfg.pretrain.steps,
                cfg.pretrain.lr,
                cfg.pretrain.batch,
                seed,
            )?;
            println!(
                "holdout ppl: {:.3} -> {:.3} over {} steps",
                outcome.initial_holdout_ppl,
                outcome.holdout_ppl,
                cfg.pretrain.steps
            );
            let mut meta = Meta::new();
            meta.insert("holdout_ppl".into(), format!("{}", outcome.holdout_ppl));
            meta.insert(
                "initial_holdout_ppl".into(),
                format!("{}", outcome.initial_holdout_ppl),
            );
            save_base(&out, &outcome.params, seed, &meta)?;
            println!("wrote {}", out.display());
        }
        Cmd::Finetune { base, flags, out } => {
            flags.apply(&mut cfg);
            let (params, _) = load_base(&base)?;
            if params.config != cfg.model_config() {
                bail!("base checkpoint does not match the configured model");
            }
            let spec = cfg.train_spec();
            let sft = desk_sft_dataset(cfg.data.sft_examples, cfg.data.probe_examples);
            let windows = replay_windows(&cfg)?;
            if spec.precision == Precision::F64 {
                bail!("f64 fine-tuning is available through the library API");
            }
            let outcome = tunelab_core::experiments::finetune(
                &params,
                &spec,
                &sft,
                &windows,
                cfg.data.probe_examples,
            )?;
            let m = &outcome.metrics;
            println!("before:");
            print_scores(&m.probe_names, &m.before);
            println!("after:");
            print_scores(&m.probe_names, &m.after);
            println!(
                "forgetting F = {:.2}, plasticity P = {:.2}, holdout KL = {:.5}",
                m.forgetting, m.plasticity, m.holdout_kl
            );
            println!(
                "measured FLOPs {:.3e} in modeled band [{:.3e}, {:.3e}] (in bounds: {})",
                outcome.ledger.measured_flops(),
                outcome.ledger.modeled.c_lora_low,
                outcome.ledger.modeled.c_lora_high,
                outcome.ledger.within_lora_bounds()
            );
            tunelab_core::checkpoint::save_adapter(
                &out,
                &outcome.adapter,
                &params.config,
                spec.seed,
                file_hash(&base)?,
                &Meta::new(),
            )?;
            println!("wrote {}", out.display());
        }
        Cmd::Grid { flags, run_id } => {
            flags.apply(&mut cfg);
            if let Some(id) = run_id {
                cfg.output.run_id = id;
            }
            let outcome = run_grid(&cfg)?;
            println!(
                "grid finished: {} cells ok, {} failed; reports in {}",
                outcome.cells.len(),
                outcome.failed.len(),
                outcome.dir.display()
            );
            for (tag, err) in &outcome.failed {
                println!("  failed {tag}: {err}");
            }
        }
        Cmd::Evaluate { base, adapter } => {
            let (params, _) = load_base(&base)?;
            let adapter = match &adapter {
                Some(p) => Some(load_adapter_for(&base, &params, p)?),
                None => None,
            };
            let (general, target) = desk_probes(cfg.data.probe_examples);
            for probe in general.iter().chain(std::iter::once(&target)) {
                let score = tunelab_core::eval::probe_score(
                    &params,
                    adapter.as_ref(),
                    probe,
                )?;
                println!("{:>8}: {score:6.2}", probe.name);
            }
        }
        Cmd::Merge { base, adapter, out } => {
            let (params, _) = load_base(&base)?;
            let adapter = load_adapter_for(&base, &params, &adapter)?;
            let merged = params.merge(&adapter)?;
            let mut meta = BTreeMap::new();
            meta.insert("merged_from".into(), base.display().to_string());
            save_base(&out, &merged, 0, &meta)?;
            println!("wrote {}", out.display());
        }
        Cmd::FisherCheck {
            base,
            adapter,
            eps,
            samples,
            seed,
        } => {
            let (params, _) = load_base(&base)?;
            let adapter = match &adapter {
                Some(p) => load_adapter_for(&base, &params, p)?,
                None => {
                    let mut a = LoraAdapter::<f32>::init(
                        &params.config,
                        4,
                        8.0,
                        0.0,
                        &mut stream(seed, "fisher-dir"),
                    )?;
                    // randomize B so the direction is nonzero
                    for (name, t) in a.named_tensors_mut() {
                        if name.ends_with(".b") {
                            *t = tunelab_core::Tensor::randn(
                                t.shape(),
                                0.05,
                                &mut stream(seed, &name),
                            );
                        }
                    }
                    a
                }
            };
            let windows = replay_windows(&cfg)?;
            let n = windows.len().min(8);
            let contexts: Vec<Vec<u32>> =
                windows[..n].iter().map(|w| w.tokens.clone()).collect();
            let points = kl_quadratic_check(
                &params.cast::<f64>(),
                &adapter.cast::<f64>(),
                &contexts,
                &eps,
                samples,
                seed,
            )?;
            println!("eps      measured-KL    predicted      ratio");
            for p in points {
                println!(
                    "{:<8} {:<14.6e} {:<14.6e} {:.4}",
                    p.eps, p.kl, p.predicted, p.ratio
                );
            }
        }
        Cmd::Report { run_dir } => {
            let path = run_dir.join("summary.csv");
            let text = std::fs::read_to_string(&path)
                .with_context(|| format!("reading {}", path.display()))?;
            print!("{text}");
            let failed: Vec<_> = std::fs::read_dir(run_dir.join("cells"))?
                .filter_map(|e| e.ok())
                .filter(|e| {
                    e.path().extension().map(|x| x == "failed").unwrap_or(false)
                })
                .collect();
            if !failed.is_empty() {
                println!("failed cells: {}", failed.len());
            }
        }
    }
    Ok(())
}
