//! embedkit command line: data generation, hard-negative mining, training,
//! checkpoint merging, evaluation and FP8 accuracy reporting.
//!
//! Every command is deterministic given its arguments and seeds. Diagnostics
//! go to stderr; data goes to files or stdout.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use embedkit::checkpoint::{load_checkpoint, Checkpoint};
use embedkit::corpus::{generate_toy_corpus, load_documents, load_samples, save_samples, ToyCorpusSpec};
use embedkit::encoder::{EncoderConfig, EncoderEmbedder};
use embedkit::eval::{classification_eval, load_bundle, retrieval_eval, save_bundle};
use embedkit::fp8::{accuracy_report, QuantMode};
use embedkit::merge::{merge_checkpoints, Granularity, MergeConfig};
use embedkit::mining::{load_mining_pairs, mine_hard_negatives, MiningConfig};
use embedkit::trainer::{train, Init, TrainConfig};

/// Configuration document with per-command sections; flags override it.
/// Unknown keys are rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    encoder: EncoderConfig,
    train: TrainConfig,
    mining: MiningConfig,
    merge: MergeConfig,
    fp8: Fp8Section,
    eval: EvalSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct Fp8Section {
    mode: QuantMode,
}

impl Default for Fp8Section {
    fn default() -> Self {
        Self {
            mode: QuantMode::PerTensor,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvalSection {
    k: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { k: vec![1, 5, 10] }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GranularityArg {
    PerTensor,
    WholeModel,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Reference,
    PerTensor,
    PerBlock,
}

#[derive(Parser)]
#[command(name = "embedkit", version, about = "Contrastive embedding toolkit")]
struct Cli {
    /// TOML configuration file providing defaults for all commands.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded toy corpus: training triplets plus an eval bundle.
    GenData {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_classes: Option<usize>,
        #[arg(long)]
        samples_per_class: Option<usize>,
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long)]
        tokens_per_doc: Option<usize>,
        #[arg(long)]
        class_overlap: Option<f64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy encoder with class-aware masked InfoNCE.
    Train {
        /// Training samples (JSONL).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and the loss log.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        chunk_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Resume from a checkpoint instead of a seeded initialization.
        #[arg(long)]
        init_checkpoint: Option<PathBuf>,
        /// Disable class-aware masking (the ablation baseline).
        #[arg(long)]
        no_cam: bool,
    },
    /// Mine hard negatives for (query, positive) pairs against a corpus.
    Mine {
        /// Pairs JSONL: {"query", "positive_text", "positive_class"}.
        #[arg(long)]
        pairs: PathBuf,
        /// Candidate documents JSONL: {"text", "class_id"}.
        #[arg(long)]
        corpus: PathBuf,
        /// Encoder checkpoint used for similarity scoring.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        margin: Option<f64>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        pool: Option<usize>,
        /// Instruction applied to queries (overrides any in the pairs file).
        #[arg(long)]
        instruction: Option<String>,
        /// Output training samples JSONL.
        #[arg(long)]
        out: PathBuf,
    },
    /// SLERP-merge two checkpoints.
    Merge {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        t: Option<f64>,
        #[arg(long, value_enum)]
        granularity: Option<GranularityArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on an eval bundle; metrics as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Bundle directory (queries.jsonl, corpus.jsonl, qrels.tsv, ...).
        #[arg(long)]
        bundle: PathBuf,
        /// Comma-separated recall cutoffs.
        #[arg(long)]
        k: Option<String>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy impact of simulated FP8 quantization; report as JSON.
    Fp8Report {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

fn require_exists(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        bail!("{what} not found: {}", path.display());
    }
    Ok(())
}

fn write_json(value: &impl serde::Serialize, out: Option<&Path>) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => fs::write(path, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_run_config(cli.config.as_deref())?;
    match cli.command {
        Command::GenData {
            seed,
            n_classes,
            samples_per_class,
            vocab_size,
            tokens_per_doc,
            class_overlap,
            out,
        } => {
            let defaults = ToyCorpusSpec::default();
            let spec = ToyCorpusSpec {
                seed: seed.unwrap_or(defaults.seed),
                n_classes: n_classes.unwrap_or(defaults.n_classes),
                samples_per_class: samples_per_class.unwrap_or(defaults.samples_per_class),
                vocab_size: vocab_size.unwrap_or(defaults.vocab_size),
                tokens_per_doc: tokens_per_doc.unwrap_or(defaults.tokens_per_doc),
                class_overlap: class_overlap.unwrap_or(defaults.class_overlap),
            };
            let corpus = generate_toy_corpus(&spec)?;
            fs::create_dir_all(&out)?;
            save_samples(out.join("train.jsonl"), &corpus.train)?;
            save_bundle(&out, &corpus.retrieval, Some(&corpus.classification))?;
            eprintln!(
                "wrote {} training samples, {} eval queries, {} eval docs to {}",
                corpus.train.len(),
                corpus.retrieval.queries.len(),
                corpus.retrieval.corpus.len(),
                out.display()
            );
        }
        Command::Train {
            data,
            out,
            seed,
            steps,
            batch_size,
            chunk_size,
            learning_rate,
            temperature,
            checkpoint_every,
            init_checkpoint,
            no_cam,
        } => {
            require_exists(&data, "training data")?;
            if let Some(p) = &init_checkpoint {
                require_exists(p, "initial checkpoint")?;
            }
            let mut train_cfg = cfg.train.clone();
            if let Some(v) = seed {
                train_cfg.seed = v;
            }
            if let Some(v) = steps {
                train_cfg.steps = v;
            }
            if let Some(v) = batch_size {
                train_cfg.effective_batch_size = v;
            }
            if let Some(v) = chunk_size {
                train_cfg.chunk_size = v;
            }
            if let Some(v) = learning_rate {
                train_cfg.learning_rate = v;
            }
            if let Some(v) = temperature {
                train_cfg.temperature = v;
            }
            if let Some(v) = checkpoint_every {
                train_cfg.checkpoint_every = v;
            }
            if no_cam {
                train_cfg.masking_enabled = false;
            }

            let samples = load_samples(&data)?;
            let (enc_cfg, init) = match init_checkpoint {
                Some(path) => {
                    let (params, enc_cfg) = load_checkpoint(&path)?;
                    (enc_cfg, Init::Params(params))
                }
                None => (cfg.encoder.clone(), Init::Seed(train_cfg.seed)),
            };
            let report = train(&train_cfg, &enc_cfg, &samples, init, &out)?;
            eprintln!(
                "trained {} steps in {:.1}s; final loss {}; checkpoint {}",
                report.losses.len(),
                report.wall_time_secs,
                report.losses.last().copied().unwrap_or(f64::NAN),
                report.final_checkpoint.display()
            );
        }
        Command::Mine {
            pairs,
            corpus,
            checkpoint,
            margin,
            top_k,
            pool,
            instruction,
            out,
        } => {
            require_exists(&pairs, "pairs file")?;
            require_exists(&corpus, "corpus file")?;
            require_exists(&checkpoint, "checkpoint")?;
            let mut mining_cfg = cfg.mining.clone();
            if let Some(v) = margin {
                mining_cfg.percentage_margin = v;
            }
            if let Some(v) = top_k {
                mining_cfg.top_k = v;
            }
            if let Some(v) = pool {
                mining_cfg.candidate_pool = v;
            }
            let mut pair_list = load_mining_pairs(&pairs)?;
            if let Some(instr) = instruction {
                for pair in &mut pair_list {
                    pair.instruction = instr.clone();
                }
            }
            let docs = load_documents(&corpus)?;
            let (params, enc_cfg) = load_checkpoint(&checkpoint)?;
            let embedder = EncoderEmbedder::new(&params, &enc_cfg);
            let mined = mine_hard_negatives(&pair_list, &docs, &embedder, &mining_cfg)?;
            save_samples(&out, &mined.samples)?;
            if mined.empty_negative_count > 0 {
                eprintln!(
                    "warning: {} pairs had no surviving negatives",
                    mined.empty_negative_count
                );
            }
            eprintln!("wrote {} samples to {}", mined.samples.len(), out.display());
        }
        Command::Merge {
            a,
            b,
            t,
            granularity,
            out,
        } => {
            require_exists(&a, "checkpoint a")?;
            require_exists(&b, "checkpoint b")?;
            let mut merge_cfg = cfg.merge.clone();
            if let Some(v) = t {
                merge_cfg.t = v;
            }
            if let Some(g) = granularity {
                merge_cfg.granularity = match g {
                    GranularityArg::PerTensor => Granularity::PerTensor,
                    GranularityArg::WholeModel => Granularity::WholeModel,
                };
            }
            let ckpt_a = Checkpoint::load(&a)?;
            let ckpt_b = Checkpoint::load(&b)?;
            let merged = merge_checkpoints(&ckpt_a, &ckpt_b, &merge_cfg)?;
            merged.save(&out)?;
            eprintln!("merged {} and {} at t={} into {}", a.display(), b.display(), merge_cfg.t, out.display());
        }
        Command::Eval {
            checkpoint,
            bundle,
            k,
            out,
        } => {
            require_exists(&checkpoint, "checkpoint")?;
            require_exists(&bundle, "bundle directory")?;
            let k_list = match k {
                Some(s) => s
                    .split(',')
                    .map(|p| p.trim().parse::<usize>().context("parsing --k"))
                    .collect::<Result<Vec<_>>>()?,
                None => cfg.eval.k.clone(),
            };
            let (params, enc_cfg) = load_checkpoint(&checkpoint)?;
            let embedder = EncoderEmbedder::new(&params, &enc_cfg);
            let loaded = load_bundle(&bundle)?;
            let retrieval = retrieval_eval(&embedder, &loaded.retrieval, &k_list)?;
            let classification = loaded
                .classification
                .as_ref()
                .map(|task| classification_eval(&embedder, task))
                .transpose()?;
            if let Some(cls) = &classification {
                if cls.degenerate_single_label {
                    eprintln!("warning: single-label classification task, accuracy is trivially 1");
                }
            }
            #[derive(serde::Serialize)]
            struct Report<'a> {
                retrieval: &'a embedkit::eval::RetrievalMetrics,
                #[serde(skip_serializing_if = "Option::is_none")]
                classification: Option<&'a embedkit::eval::ClassificationMetrics>,
            }
            write_json(
                &Report {
                    retrieval: &retrieval,
                    classification: classification.as_ref(),
                },
                out.as_deref(),
            )?;
        }
        Command::Fp8Report {
            checkpoint,
            bundle,
            mode,
            out,
        } => {
            require_exists(&checkpoint, "checkpoint")?;
            require_exists(&bundle, "bundle directory")?;
            let mode = match mode {
                Some(ModeArg::Reference) => QuantMode::Reference,
                Some(ModeArg::PerTensor) => QuantMode::PerTensor,
                Some(ModeArg::PerBlock) => QuantMode::PerBlock,
                None => cfg.fp8.mode,
            };
            let ckpt = Checkpoint::load(&checkpoint)?;
            let loaded = load_bundle(&bundle)?;
            let report = accuracy_report(&ckpt, &loaded, mode, &cfg.eval.k)?;
            write_json(&report, out.as_deref())?;
        }
    }
    Ok(())
}
