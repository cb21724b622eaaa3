//! Command-line surface: config file parsing with flag overrides, run
//! manifests, and the pretrain / finetune / eval / extract / ablate
//! subcommands.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::ablation::{
    run_arms, run_mask_grid, run_steps, AblationContext, AblationOutcome, AblationSpec,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{
    load_choice_dataset, load_cls_dataset, load_corpus, load_span_dataset, load_tag_dataset,
    MaskingPolicy,
};
use crate::error::{Error, Result};
use crate::eval;
use crate::features::{extract_features, FeatureStrategy};
use crate::fixtures;
use crate::model::{AttentionMode, Forward, ModelConfig};
use crate::tensor::Tape;
use crate::tokenizer::{wordpiece, TokenizerConfig, Vocab};
use crate::train::{
    evaluate_checkpoint, finetune, finetune_grid, pretrain, random_restarts, FinetuneOptions,
    HeadKind, Objective, PretrainModel, PretrainOptions, TaskDataset,
};

/// Merged view of the config file plus flag overrides. Every run's effective
/// configuration is serialized into its manifest, so any artifact can be
/// reproduced from the manifest alone.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub pretrain: PretrainOptions,
    pub finetune: FinetuneOptions,
    pub tokenizer: TokenizerConfig,
    pub workers: usize,
    pub restarts: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: fixtures::desk_config(),
            seed: 42,
            pretrain: PretrainOptions::default(),
            finetune: FinetuneOptions::default(),
            tokenizer: TokenizerConfig::default(),
            workers: 1,
            restarts: 1,
        }
    }
}

impl RunConfig {
    /// Apply one `key=value` assignment; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let int = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("{} must be an integer, got {:?}", key, v)))
        };
        let int64 = |v: &str| -> Result<u64> {
            v.parse()
                .map_err(|_| Error::Config(format!("{} must be an integer, got {:?}", key, v)))
        };
        let num = |v: &str| -> Result<f64> {
            v.parse()
                .map_err(|_| Error::Config(format!("{} must be a number, got {:?}", key, v)))
        };
        let boolean = |v: &str| -> Result<bool> {
            match v {
                "true" | "1" | "on" => Ok(true),
                "false" | "0" | "off" => Ok(false),
                _ => Err(Error::Config(format!(
                    "{} must be a boolean, got {:?}",
                    key, v
                ))),
            }
        };
        match key {
            "L" => self.model.layers = int(value)?,
            "H" => self.model.hidden = int(value)?,
            "A" => self.model.heads = int(value)?,
            "V" => self.model.vocab_size = int(value)?,
            "max_positions" => self.model.max_positions = int(value)?,
            "ffn_size" => self.model.ffn_size = int(value)?,
            "dropout" => self.model.dropout = num(value)?,
            "attention_mode" => self.model.attention_mode = AttentionMode::parse(value)?,
            "seed" => self.seed = int64(value)?,
            "steps" => self.pretrain.steps = int64(value)?,
            "batch_size" => self.pretrain.batch_size = int(value)?,
            "max_len" => self.pretrain.max_len = int(value)?,
            "base_lr" => self.pretrain.base_lr = num(value)?,
            "warmup_steps" => self.pretrain.warmup_steps = int64(value)?,
            "checkpoint_every" => {
                let v = int64(value)?;
                self.pretrain.checkpoint_every = (v > 0).then_some(v);
            }
            "objective" => self.pretrain.objective = Objective::parse(value)?,
            "grad_clip" => {
                let v = num(value)?;
                self.pretrain.grad_clip = (v > 0.0).then_some(v);
            }
            "tie_mlm" => self.pretrain.tie_mlm = boolean(value)?,
            "log_every" => self.pretrain.log_every = int64(value)?,
            "select_rate" => self.pretrain.policy.select_rate = num(value)?,
            "p_mask" => self.pretrain.policy.p_mask = num(value)?,
            "p_same" => self.pretrain.policy.p_same = num(value)?,
            "p_random" => self.pretrain.policy.p_random = num(value)?,
            "epochs" => self.finetune.epochs = int(value)?,
            "ft_batch_size" => self.finetune.batch_size = int(value)?,
            "ft_lr" => self.finetune.lr = num(value)?,
            "ft_warmup_frac" => self.finetune.warmup_frac = num(value)?,
            "lowercase" => self.tokenizer.lowercase = boolean(value)?,
            "strip_accents" => self.tokenizer.strip_accents = boolean(value)?,
            "workers" => self.workers = int(value)?.max(1),
            "restarts" => self.restarts = int(value)?.max(1),
            other => return Err(Error::Config(format!("unknown config key {:?}", other))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected key=value, got {:?}",
                    lineno + 1,
                    raw
                ))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.policy.validate()
    }

    /// Effective flat form, one key per line, for manifests.
    pub fn to_flat(&self) -> String {
        let mut out = self.model.to_flat();
        out.push_str(&format!(
            "seed={}\nsteps={}\nbatch_size={}\nmax_len={}\nbase_lr={}\nwarmup_steps={}\n\
             checkpoint_every={}\nobjective={}\ngrad_clip={}\ntie_mlm={}\nlog_every={}\n\
             select_rate={}\np_mask={}\np_same={}\np_random={}\nepochs={}\nft_batch_size={}\n\
             ft_lr={}\nft_warmup_frac={}\nlowercase={}\nstrip_accents={}\nworkers={}\nrestarts={}\n",
            self.seed,
            self.pretrain.steps,
            self.pretrain.batch_size,
            self.pretrain.max_len,
            self.pretrain.base_lr,
            self.pretrain.warmup_steps,
            self.pretrain.checkpoint_every.unwrap_or(0),
            self.pretrain.objective.name(),
            self.pretrain.grad_clip.unwrap_or(0.0),
            self.pretrain.tie_mlm,
            self.pretrain.log_every,
            self.pretrain.policy.select_rate,
            self.pretrain.policy.p_mask,
            self.pretrain.policy.p_same,
            self.pretrain.policy.p_random,
            self.finetune.epochs,
            self.finetune.batch_size,
            self.finetune.lr,
            self.finetune.warmup_frac,
            self.tokenizer.lowercase,
            self.tokenizer.strip_accents,
            self.workers,
            self.restarts,
        ));
        out
    }
}

#[derive(Parser, Debug)]
#[command(name = "minibert", version, about = "Desk-scale bidirectional encoder pre-training and fine-tuning")]
pub struct Cli {
    /// Directory all relative paths resolve against and artifacts land in.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,

    /// Flat key=value config file; flags override file values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Seed override (falls back to config, then MINIBERT_SEED, then 42).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Extra key=value overrides applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,

    /// Bound on worker threads for independent sub-runs.
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Pre-train from a document corpus, emitting checkpoints.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Final checkpoint path (default checkpoint.mbrt in the workdir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune a pre-trained checkpoint on a task dataset.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        /// One of cls, span, span_v2, choice, tag.
        #[arg(long)]
        task: String,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Run the exhaustive batch/lr/epoch search instead of one run.
        #[arg(long)]
        grid: bool,
        /// Several restarts varying shuffling and head init; keeps the best.
        #[arg(long)]
        restarts: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        lowercase: Option<bool>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Metrics (and persisted predictions) for a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// One of cls, span, span_v2, choice, tag, ppl.
        #[arg(long)]
        task: String,
        /// Dev dataset (or held-out corpus for ppl).
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Extract frozen per-token features into a cache file.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input text, one sequence per line.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// embeddings-only, second-to-last, last, weighted-sum-last-4,
        /// concat-last-4, or weighted-sum-all.
        #[arg(long)]
        strategy: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation preset.
    Ablate {
        /// no-nsp, ltr-no-nsp, mask-grid, or steps.
        #[arg(long)]
        arm: String,
        /// Pre-training corpus (defaults to a bundled fixture).
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Checkpoint steps for the steps preset, comma separated.
        #[arg(long)]
        ks: Option<String>,
        /// Rate triples for the mask-grid preset: "80,10,10;100,0,0;0,0,100".
        #[arg(long)]
        rates: Option<String>,
    },
    /// Materialize the bundled fixture files.
    Fixtures {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve(workdir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        workdir.join(p)
    }
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let path = resolve(&cli.workdir, path);
            let text = std::fs::read_to_string(&path).map_err(|e| {
                Error::Config(format!("cannot read config {}: {}", path.display(), e))
            })?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    for assignment in &cli.sets {
        let (k, v) = assignment.split_once('=').ok_or_else(|| {
            Error::Config(format!("--set expects KEY=VALUE, got {:?}", assignment))
        })?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    } else if cli.config.is_none() || !cli.sets.iter().any(|s| s.starts_with("seed=")) {
        if let Ok(env_seed) = std::env::var("MINIBERT_SEED") {
            if cli.seed.is_none() {
                cfg.seed = env_seed.parse().map_err(|_| {
                    Error::Config(format!("MINIBERT_SEED must be an integer, got {:?}", env_seed))
                })?;
            }
        }
    }
    if let Some(w) = cli.workers {
        cfg.workers = w.max(1);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn git_hash() -> String {
    let mut dir = std::env::current_dir().ok();
    while let Some(d) = dir {
        let head = d.join(".git/HEAD");
        if let Ok(contents) = std::fs::read_to_string(&head) {
            let contents = contents.trim();
            if let Some(refname) = contents.strip_prefix("ref: ") {
                if let Ok(hash) = std::fs::read_to_string(d.join(".git").join(refname)) {
                    return hash.trim().to_string();
                }
            }
            return contents.to_string();
        }
        dir = d.parent().map(|p| p.to_path_buf());
    }
    "unknown".to_string()
}

fn write_manifest(
    workdir: &Path,
    command: &str,
    cfg: &RunConfig,
    reproduce: &str,
    artifacts: &[PathBuf],
) -> Result<PathBuf> {
    let manifest = json!({
        "command": command,
        "seed": cfg.seed,
        "config": cfg.to_flat(),
        "source": {
            "package": "minibert",
            "version": env!("CARGO_PKG_VERSION"),
            "git": git_hash(),
        },
        "reproduce": reproduce,
        "artifacts": artifacts.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
    });
    std::fs::create_dir_all(workdir)?;
    let path = workdir.join(format!("manifest-{}.json", command));
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Data(format!("json: {}", e))
    }
}

fn load_task_dataset(
    kind: HeadKind,
    train: &Path,
    dev: &Path,
    vocab: &Vocab,
    max_len: usize,
    tok: TokenizerConfig,
) -> Result<TaskDataset> {
    Ok(match kind {
        HeadKind::Classification => {
            let train = load_cls_dataset(train, vocab, max_len, tok)?;
            let dev = load_cls_dataset(dev, vocab, max_len, tok)?;
            let labels = train
                .iter()
                .chain(&dev)
                .map(|e| e.label + 1)
                .max()
                .unwrap_or(2)
                .max(2);
            TaskDataset::Cls { train, dev, labels }
        }
        HeadKind::Span | HeadKind::SpanV2 => {
            let (train, _) = load_span_dataset(train, vocab, max_len, tok)?;
            let (dev, _) = load_span_dataset(dev, vocab, max_len, tok)?;
            TaskDataset::Span {
                train,
                dev,
                v2: kind == HeadKind::SpanV2,
            }
        }
        HeadKind::Choice => TaskDataset::Choice {
            train: load_choice_dataset(train, vocab, max_len, tok)?,
            dev: load_choice_dataset(dev, vocab, max_len, tok)?,
        },
        HeadKind::Tagging => {
            let train = load_tag_dataset(train, vocab, max_len, tok)?;
            let dev = load_tag_dataset(dev, vocab, max_len, tok)?;
            let labels = train
                .iter()
                .chain(&dev)
                .flat_map(|e| e.labels.iter())
                .filter(|&&l| l != crate::data::IGNORE_INDEX)
                .map(|&l| l + 1)
                .max()
                .unwrap_or(2)
                .max(2);
            TaskDataset::Tag { train, dev, labels }
        }
    })
}

/// Run a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error\tcategory={}\t{}", e.category(), e);
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli)?;
    let wd = &cli.workdir;
    match &cli.command {
        Command::Pretrain {
            corpus,
            vocab,
            out,
            resume,
        } => {
            let vocab_path = resolve(wd, vocab);
            let corpus_path = resolve(wd, corpus);
            let v = Vocab::load(&vocab_path)?;
            let mut model_cfg = cfg.model.clone();
            if model_cfg.vocab_size != v.len() {
                log::info!("setting V={} from the vocab file", v.len());
                model_cfg.vocab_size = v.len();
            }
            let docs = load_corpus(&corpus_path, &v, cfg.tokenizer)?;
            let resume_ckpt = resume
                .as_ref()
                .map(|p| load_checkpoint(&resolve(wd, p)))
                .transpose()?;
            let out_path = resolve(wd, out.as_deref().unwrap_or(Path::new("checkpoint.mbrt")));
            let mut artifacts = Vec::new();
            let result = pretrain(
                &model_cfg,
                &docs,
                &v,
                &cfg.pretrain,
                cfg.seed,
                resume_ckpt.as_ref(),
                &mut |step, ckpt| {
                    let p = resolve(wd, Path::new(&format!("checkpoint-{}.mbrt", step)));
                    save_checkpoint(&p, ckpt)?;
                    artifacts.push(p);
                    Ok(())
                },
            )?;
            save_checkpoint(&out_path, &result.checkpoint)?;
            artifacts.push(out_path.clone());
            let losses_path = resolve(wd, Path::new("losses.tsv"));
            let mut tsv = String::from("step\ttotal\tmlm\tnsp\n");
            for l in &result.losses {
                tsv.push_str(&format!(
                    "{}\t{:.6}\t{:.6}\t{}\n",
                    l.step,
                    l.total,
                    l.mlm,
                    l.nsp.map_or("-".to_string(), |v| format!("{:.6}", v))
                ));
            }
            std::fs::write(&losses_path, tsv)?;
            artifacts.push(losses_path);
            let reproduce = format!(
                "minibert pretrain --corpus {} --vocab {} --seed {}",
                corpus.display(),
                vocab.display(),
                cfg.seed
            );
            write_manifest(wd, "pretrain", &cfg, &reproduce, &artifacts)?;
            let last = result.losses.last().unwrap();
            println!(
                "pre-training done: {} steps, final loss {:.4} (mlm {:.4}), checkpoint {}",
                cfg.pretrain.steps,
                last.total,
                last.mlm,
                out_path.display()
            );
            Ok(())
        }
        Command::Finetune {
            checkpoint,
            task,
            train,
            dev,
            vocab,
            grid,
            restarts,
            max_len,
            lowercase,
            out,
        } => {
            let kind = HeadKind::parse(task)?;
            let v = Vocab::load(&resolve(wd, vocab))?;
            let ckpt = load_checkpoint(&resolve(wd, checkpoint))?;
            let mut tok = cfg.tokenizer;
            if let Some(lc) = lowercase {
                tok.lowercase = *lc;
            }
            let max_len = max_len.unwrap_or(ckpt.config.max_positions);
            let data = load_task_dataset(
                kind,
                &resolve(wd, train),
                &resolve(wd, dev),
                &v,
                max_len,
                tok,
            )?;
            let out_path = resolve(
                wd,
                out.as_deref()
                    .unwrap_or(Path::new(&format!("{}-checkpoint.mbrt", kind.name()))),
            );
            let report_path = resolve(wd, Path::new(&format!("{}-report.json", kind.name())));
            let mut artifacts = vec![report_path.clone()];
            let report_json;
            if *grid {
                let grid_result = finetune_grid(&ckpt, &data, &cfg.finetune, cfg.seed)?;
                let best = grid_result.best().clone();
                let rows: Vec<_> = grid_result
                    .runs
                    .iter()
                    .map(|r| {
                        json!({
                            "batch_size": r.batch_size,
                            "lr": r.lr,
                            "epochs": r.epochs,
                            "dev_metric": r.dev_metric,
                        })
                    })
                    .collect();
                report_json = json!({
                    "task": kind.name(),
                    "grid": rows,
                    "best": {
                        "batch_size": best.batch_size,
                        "lr": best.lr,
                        "epochs": best.epochs,
                        "dev_metric": best.dev_metric,
                    },
                });
                println!(
                    "grid done: {} runs, best bs={} lr={} epochs={} dev={:.4}",
                    grid_result.runs.len(),
                    best.batch_size,
                    best.lr,
                    best.epochs,
                    best.dev_metric
                );
            } else {
                let n = restarts.unwrap_or(cfg.restarts).max(1);
                let result = if n > 1 {
                    let r = random_restarts(&ckpt, &data, &cfg.finetune, n, cfg.seed)?;
                    println!(
                        "restarts: dev metrics {:?}, keeping run {}",
                        r.dev_metrics, r.best_index
                    );
                    r.best
                } else {
                    finetune(&ckpt, &data, &cfg.finetune, cfg.seed)?
                };
                save_checkpoint(&out_path, &result.checkpoint)?;
                artifacts.push(out_path.clone());
                report_json = json!({
                    "task": kind.name(),
                    "dev_metric": result.dev_metric,
                    "epochs": result
                        .epoch_reports
                        .iter()
                        .map(|r| json!({
                            "metrics": r.metrics,
                            "examples": r.examples,
                        }))
                        .collect::<Vec<_>>(),
                    "final": result.final_report(),
                });
                println!(
                    "fine-tuning done: task {} dev metric {:.4}, checkpoint {}",
                    kind.name(),
                    result.dev_metric,
                    out_path.display()
                );
            }
            std::fs::write(&report_path, serde_json::to_string_pretty(&report_json)?)?;
            let reproduce = format!(
                "minibert finetune --checkpoint {} --task {} --train {} --dev {} --vocab {} --seed {}{}",
                checkpoint.display(),
                task,
                train.display(),
                dev.display(),
                vocab.display(),
                cfg.seed,
                if *grid { " --grid" } else { "" }
            );
            write_manifest(wd, "finetune", &cfg, &reproduce, &artifacts)?;
            Ok(())
        }
        Command::Eval {
            checkpoint,
            task,
            dev,
            vocab,
            max_len,
        } => {
            let v = Vocab::load(&resolve(wd, vocab))?;
            let ckpt = load_checkpoint(&resolve(wd, checkpoint))?;
            let max_len = max_len.unwrap_or(ckpt.config.max_positions);
            let report = if task == "ppl" {
                let model = PretrainModel::<f32>::from_checkpoint(&ckpt)?;
                let docs = load_corpus(&resolve(wd, dev), &v, cfg.tokenizer)?;
                let ppl = eval::masked_lm_perplexity(
                    &model,
                    &docs,
                    &cfg.pretrain.policy,
                    &v,
                    cfg.seed,
                    200,
                    max_len,
                )?;
                println!("held-out masked-token perplexity: {:.3}", ppl);
                eval::MetricReport::new(
                    "ppl",
                    vec![("perplexity".into(), ppl)],
                    200,
                    cfg.seed,
                    eval::config_hash(&ckpt.config),
                )
            } else {
                let kind = HeadKind::parse(task)?;
                let dev_path = resolve(wd, dev);
                let data = load_task_dataset(kind, &dev_path, &dev_path, &v, max_len, cfg.tokenizer)?;
                let result = evaluate_checkpoint(&ckpt, &data, cfg.seed)?;
                let preds_path = resolve(wd, Path::new(&format!("{}-predictions.jsonl", task)));
                let lines: Vec<String> = result
                    .predictions
                    .iter()
                    .map(|p| serde_json::to_string(p).unwrap())
                    .collect();
                std::fs::write(&preds_path, lines.join("\n") + "\n")?;
                for (k, val) in &result.report.metrics {
                    println!("{}\t{:.4}", k, val);
                }
                result.report
            };
            let report_path = resolve(wd, Path::new(&format!("eval-{}.json", task)));
            std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
            let reproduce = format!(
                "minibert eval --checkpoint {} --task {} --dev {} --vocab {} --seed {}",
                checkpoint.display(),
                task,
                dev.display(),
                vocab.display(),
                cfg.seed
            );
            write_manifest(wd, "eval", &cfg, &reproduce, &[report_path])?;
            Ok(())
        }
        Command::Extract {
            checkpoint,
            input,
            vocab,
            strategy,
            out,
        } => {
            let v = Vocab::load(&resolve(wd, vocab))?;
            let ckpt_path = resolve(wd, checkpoint);
            let ckpt = load_checkpoint(&ckpt_path)?;
            let model = PretrainModel::<f32>::from_checkpoint(&ckpt)?;
            let strat = FeatureStrategy::parse(strategy, ckpt.config.layers)?;
            let input_path = resolve(wd, input);
            let text = std::fs::read_to_string(&input_path)
                .map_err(|e| Error::Data(format!("cannot read {}: {}", input_path.display(), e)))?;
            let tape = Tape::disabled();
            let mut features = Vec::new();
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let toks = wordpiece(line, &v, cfg.tokenizer);
                let seq = crate::tokenizer::encode_pair(&toks, None, ckpt.config.max_positions, &v)?;
                let mut fwd = Forward::inference(&tape);
                let enc_out = model.encoder.forward(&seq, None, &mut fwd)?;
                features.push(extract_features(&enc_out, &strat)?);
            }
            if features.is_empty() {
                return Err(Error::Data("input has no sequences".into()));
            }
            let corpus_hash = eval::content_hash(text.as_bytes());
            let ckpt_hash = eval::content_hash(&std::fs::read(&ckpt_path)?);
            let default_name =
                crate::features::cache_file_name(&corpus_hash, &ckpt_hash, strat.name());
            let out_path = resolve(wd, out.as_deref().unwrap_or(Path::new(&default_name)));
            crate::features::save_features(&out_path, &features)?;
            println!(
                "extracted {} sequences, per-token dim {}, cache {}",
                features.len(),
                strat.output_dim(ckpt.config.hidden),
                out_path.display()
            );
            let reproduce = format!(
                "minibert extract --checkpoint {} --input {} --vocab {} --strategy {}",
                checkpoint.display(),
                input.display(),
                vocab.display(),
                strategy
            );
            write_manifest(wd, "extract", &cfg, &reproduce, &[out_path])?;
            Ok(())
        }
        Command::Ablate {
            arm,
            corpus,
            vocab,
            ks,
            rates,
        } => {
            let fixture_dir = resolve(wd, Path::new("fixtures"));
            let (vocab_path, corpus_path) = match (vocab, corpus) {
                (Some(v), Some(c)) => (resolve(wd, v), resolve(wd, c)),
                _ => {
                    fixtures::write_all(&fixture_dir)?;
                    let default_corpus = if arm == "mask-grid" || arm == "steps" {
                        "pretrain.txt"
                    } else {
                        "cloze_pretrain.txt"
                    };
                    (
                        fixture_dir.join("vocab.txt"),
                        fixture_dir.join(default_corpus),
                    )
                }
            };
            let v = Vocab::load(&vocab_path)?;
            let mut model_cfg = cfg.model.clone();
            model_cfg.vocab_size = v.len();
            let docs = load_corpus(&corpus_path, &v, cfg.tokenizer)?;
            let cache_dir = resolve(wd, Path::new("ablation-cache"));
            let ctx = AblationContext {
                vocab: &v,
                docs: &docs,
                config: model_cfg,
                pretrain: cfg.pretrain.clone(),
                finetune: cfg.finetune,
                seed: cfg.seed,
                cache_dir: Some(cache_dir),
                workers: cfg.workers,
            };
            let partial_path = resolve(wd, Path::new("ablation-arms.jsonl"));
            let mut partial = std::fs::File::create(&partial_path)?;
            let mut sink = |name: &str, report: &eval::MetricReport| -> Result<()> {
                use std::io::Write;
                writeln!(
                    partial,
                    "{}",
                    serde_json::to_string(&json!({ "arm": name, "report": report }))?
                )?;
                Ok(())
            };
            let outcome: AblationOutcome = match arm.as_str() {
                "no-nsp" | "ltr-no-nsp" => {
                    let spec = AblationSpec::named(arm)?;
                    run_arms(&ctx, &[spec], &fixtures::cloze_dev(), &mut sink)?
                }
                "mask-grid" => {
                    let triples = match rates {
                        None => vec![(0.8, 0.1, 0.1), (1.0, 0.0, 0.0), (0.0, 0.0, 1.0)],
                        Some(text) => parse_rate_triples(text)?,
                    };
                    run_mask_grid(&ctx, &triples, &mut sink)?
                }
                "steps" => {
                    let ks: Vec<u64> = match ks {
                        None => vec![500, 1000, 2000],
                        Some(text) => text
                            .split(',')
                            .map(|s| {
                                s.trim().parse().map_err(|_| {
                                    Error::Config(format!("bad step count {:?}", s))
                                })
                            })
                            .collect::<Result<_>>()?,
                    };
                    run_steps(&ctx, &ks, &mut sink)?
                }
                other => {
                    return Err(Error::Config(format!(
                        "unknown arm preset {:?}; expected no-nsp, ltr-no-nsp, mask-grid, steps",
                        other
                    )))
                }
            };
            let rendered = outcome.render();
            print!("{}", rendered);
            let report_path = resolve(wd, Path::new(&format!("ablation-{}.tsv", arm)));
            std::fs::write(&report_path, &rendered)?;
            let reproduce = format!("minibert ablate --arm {} --seed {}", arm, cfg.seed);
            write_manifest(
                wd,
                "ablate",
                &cfg,
                &reproduce,
                &[report_path, partial_path],
            )?;
            Ok(())
        }
        Command::Fixtures { out } => {
            let dir = resolve(wd, out.as_deref().unwrap_or(Path::new("fixtures")));
            let written = fixtures::write_all(&dir)?;
            for (name, path) in &written {
                println!("{}\t{}", name, path.display());
            }
            let paths: Vec<PathBuf> = written.into_iter().map(|(_, p)| p).collect();
            write_manifest(wd, "fixtures", &cfg, "minibert fixtures", &paths)?;
            Ok(())
        }
    }
}

fn parse_rate_triples(text: &str) -> Result<Vec<(f64, f64, f64)>> {
    text.split(';')
        .map(|triple| {
            let parts: Vec<f64> = triple
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad rate {:?}", s)))
                })
                .collect::<Result<_>>()?;
            if parts.len() != 3 {
                return Err(Error::Config(format!(
                    "rate triple needs three values, got {:?}",
                    triple
                )));
            }
            Ok((parts[0] / 100.0, parts[1] / 100.0, parts[2] / 100.0))
        })
        .collect()
}

/// Scale a default masking policy's select rate; kept public for tests that
/// build policies from percentages.
pub fn policy_from_percentages(mask: f64, same: f64, rnd: f64) -> Result<MaskingPolicy> {
    MaskingPolicy::new(0.15, mask / 100.0, same / 100.0, rnd / 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys() {
        let err = RunConfig::parse("L=2\nbogus_key=1\n").unwrap_err().to_string();
        assert!(err.contains("bogus_key"), "{err}");
    }

    #[test]
    fn config_round_trips_through_flat_form() {
        let mut cfg = RunConfig::default();
        cfg.set("steps", "123").unwrap();
        cfg.set("p_mask", "0.7").unwrap();
        cfg.set("p_same", "0.2").unwrap();
        cfg.set("attention_mode", "causal").unwrap();
        let text = cfg.to_flat();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back.pretrain.steps, 123);
        assert_eq!(back.pretrain.policy.p_mask, 0.7);
        assert_eq!(back.model.attention_mode, AttentionMode::Causal);
        assert_eq!(back.to_flat(), text);
    }

    #[test]
    fn rate_triples_parse() {
        let triples = parse_rate_triples("80,10,10;100,0,0").unwrap();
        assert_eq!(triples, vec![(0.8, 0.1, 0.1), (1.0, 0.0, 0.0)]);
        assert!(parse_rate_triples("80,10").is_err());
    }
}
