//! Ablation harnesses: pre-training-task arms, the masking-rate grid, and
//! the checkpoint-step series.
//!
//! Arms that share a pre-training configuration reuse content-addressed
//! cached checkpoints keyed by (config, options, corpus, seed), so reruns
//! and downstream-only variations never pay for pre-training twice.

use std::path::{Path, PathBuf};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::data::{load_tag_dataset, parse_corpus, Document, MaskingPolicy, TagExample};
use crate::error::{Error, Result};
use crate::eval::{self, MetricReport};
use crate::features::{extract_features, FeatureStrategy, FrozenExample, TaggerConfig};
use crate::fixtures;
use crate::model::{AttentionMode, Forward, ModelConfig};
use crate::tensor::Tape;
use crate::train::{
    finetune, pretrain, FinetuneOptions, Objective, PretrainModel, PretrainOptions, TaskDataset,
};
use crate::tokenizer::{TokenizerConfig, Vocab};

/// Overrides an arm applies on top of the base configuration. Only these
/// fields may differ between arms.
#[derive(Clone, Debug, Default)]
pub struct AblationOverrides {
    pub attention_mode: Option<AttentionMode>,
    pub objective: Option<Objective>,
    pub policy: Option<MaskingPolicy>,
    pub checkpoint_steps: Option<Vec<u64>>,
}

#[derive(Clone, Debug)]
pub struct AblationSpec {
    pub name: String,
    pub overrides: AblationOverrides,
}

impl AblationSpec {
    pub fn named(name: &str) -> Result<Self> {
        let (objective, mode) = eval::arm_objective(name)?;
        Ok(AblationSpec {
            name: name.to_string(),
            overrides: AblationOverrides {
                attention_mode: Some(mode),
                objective: Some(objective),
                ..Default::default()
            },
        })
    }
}

/// Everything an ablation needs from the outside world.
pub struct AblationContext<'a> {
    pub vocab: &'a Vocab,
    pub docs: &'a [Document],
    pub config: ModelConfig,
    pub pretrain: PretrainOptions,
    pub finetune: FinetuneOptions,
    pub seed: u64,
    /// Directory for content-addressed checkpoint reuse; None disables
    /// caching.
    pub cache_dir: Option<PathBuf>,
    /// Bound on arms run concurrently.
    pub workers: usize,
}

impl<'a> AblationContext<'a> {
    fn pretrain_key(&self, config: &ModelConfig, opts: &PretrainOptions, seed: u64) -> String {
        let descr = format!(
            "{}|steps={}|bs={}|maxlen={}|lr={}|warmup={}|obj={}|clip={:?}|tie={}|policy={},{},{},{}|seed={}",
            config.to_flat(),
            opts.steps,
            opts.batch_size,
            opts.max_len,
            opts.base_lr,
            opts.warmup_steps,
            opts.objective.name(),
            opts.grad_clip,
            opts.tie_mlm,
            opts.policy.select_rate,
            opts.policy.p_mask,
            opts.policy.p_same,
            opts.policy.p_random,
            seed
        );
        let corpus: String = self
            .docs
            .iter()
            .map(|d| format!("{:?};", d.sentences))
            .collect();
        eval::content_hash(format!("{}\n{}", descr, corpus).as_bytes())
    }

    /// Pre-train or reuse the cached checkpoint for these exact settings.
    /// Interval checkpoints, when requested, are returned as (step, ckpt).
    fn pretrain_cached(
        &self,
        config: &ModelConfig,
        opts: &PretrainOptions,
        wanted_steps: &[u64],
    ) -> Result<(Checkpoint, Vec<(u64, Checkpoint)>)> {
        let key = self.pretrain_key(config, opts, self.seed);
        let path = |suffix: &str| {
            self.cache_dir
                .as_ref()
                .map(|d| d.join(format!("arm-{}{}.mbrt", key, suffix)))
        };
        let mut hits = Vec::new();
        if let Some(final_path) = path("") {
            if final_path.exists() {
                let mut ok = true;
                for &k in wanted_steps {
                    let p = path(&format!("-{}", k)).unwrap();
                    if p.exists() {
                        hits.push((k, load_checkpoint(&p)?));
                    } else {
                        ok = false;
                        break;
                    }
                }
                if ok {
                    return Ok((load_checkpoint(&final_path)?, hits));
                }
                hits.clear();
            }
        }
        let mut interval = Vec::new();
        let wanted = wanted_steps.to_vec();
        let result = pretrain(
            config,
            self.docs,
            self.vocab,
            opts,
            self.seed,
            None,
            &mut |step, ckpt| {
                if wanted.contains(&step) {
                    interval.push((step, ckpt.clone()));
                }
                Ok(())
            },
        )?;
        if let Some(final_path) = path("") {
            save_checkpoint(&final_path, &result.checkpoint)?;
            for (k, ckpt) in &interval {
                save_checkpoint(&path(&format!("-{}", k)).unwrap(), ckpt)?;
            }
        }
        Ok((result.checkpoint, interval))
    }
}

/// One row of the masking-rate grid: the branch split and the two downstream
/// columns.
#[derive(Clone, Debug, serde::Serialize)]
pub struct MaskGridRow {
    pub mask: f64,
    pub same: f64,
    pub rnd: f64,
    pub finetune_accuracy: f64,
    pub feature_accuracy: f64,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct StepPoint {
    pub k: u64,
    pub accuracy: f64,
}

#[derive(Debug)]
pub enum AblationOutcome {
    /// One report per named arm.
    Arms(Vec<(String, MetricReport)>),
    /// One row per requested (mask, same, rnd) triple.
    MaskGrid(Vec<MaskGridRow>),
    /// One (k, accuracy) point per pre-training checkpoint.
    Steps(Vec<StepPoint>),
}

impl AblationOutcome {
    /// Human-readable grid for standard output.
    pub fn render(&self) -> String {
        match self {
            AblationOutcome::Arms(rows) => {
                let mut out = String::from("arm\tmetrics\n");
                for (name, report) in rows {
                    let metrics: Vec<String> = report
                        .metrics
                        .iter()
                        .map(|(k, v)| format!("{}={:.4}", k, v))
                        .collect();
                    out.push_str(&format!("{}\t{}\n", name, metrics.join("\t")));
                }
                out
            }
            AblationOutcome::MaskGrid(rows) => {
                let mut out = String::from("mask\tsame\trnd\tfine-tune\tfeature-based\n");
                for r in rows {
                    out.push_str(&format!(
                        "{:.0}%\t{:.0}%\t{:.0}%\t{:.4}\t{:.4}\n",
                        r.mask * 100.0,
                        r.same * 100.0,
                        r.rnd * 100.0,
                        r.finetune_accuracy,
                        r.feature_accuracy
                    ));
                }
                out
            }
            AblationOutcome::Steps(points) => {
                let mut out = String::from("k\taccuracy\n");
                for p in points {
                    out.push_str(&format!("{}\t{:.4}\n", p.k, p.accuracy));
                }
                out
            }
        }
    }
}

fn tag_dataset_from_fixture(vocab: &Vocab, max_len: usize) -> Result<(Vec<TagExample>, Vec<TagExample>)> {
    let dir = std::env::temp_dir().join(format!("minibert-tagfix-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let train_p = dir.join("tag_train.tsv");
    let dev_p = dir.join("tag_dev.tsv");
    std::fs::write(&train_p, fixtures::tag_train())?;
    std::fs::write(&dev_p, fixtures::tag_dev())?;
    let cfg = TokenizerConfig::default();
    let train = load_tag_dataset(&train_p, vocab, max_len, cfg)?;
    let dev = load_tag_dataset(&dev_p, vocab, max_len, cfg)?;
    let _ = std::fs::remove_dir_all(&dir);
    Ok((train, dev))
}

fn cls_dataset_from_fixture(vocab: &Vocab, max_len: usize) -> Result<TaskDataset> {
    let dir = std::env::temp_dir().join(format!("minibert-clsfix-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let train_p = dir.join("cls_train.tsv");
    let dev_p = dir.join("cls_dev.tsv");
    std::fs::write(&train_p, fixtures::cls_train())?;
    std::fs::write(&dev_p, fixtures::cls_dev())?;
    let cfg = TokenizerConfig::default();
    let data = TaskDataset::Cls {
        train: crate::data::load_cls_dataset(&train_p, vocab, max_len, cfg)?,
        dev: crate::data::load_cls_dataset(&dev_p, vocab, max_len, cfg)?,
        labels: 2,
    };
    let _ = std::fs::remove_dir_all(&dir);
    Ok(data)
}

/// Frozen-feature tagging accuracy from a checkpoint (the feature-based
/// column of the masking grid).
pub fn feature_based_tag_accuracy(
    ckpt: &Checkpoint,
    vocab: &Vocab,
    strategy: &FeatureStrategy,
    seed: u64,
) -> Result<f64> {
    let model = PretrainModel::<f32>::from_checkpoint(ckpt)?;
    let (train, dev) = tag_dataset_from_fixture(vocab, model.config().max_positions)?;
    let tape = Tape::disabled();
    let freeze = |set: &[TagExample]| -> Result<Vec<FrozenExample>> {
        set.iter()
            .map(|ex| {
                let mut fwd = Forward::inference(&tape);
                let out = model.encoder.forward(&ex.seq, None, &mut fwd)?;
                Ok(FrozenExample {
                    layers: vec![extract_features(&out, strategy)?],
                    labels: ex.labels.clone(),
                })
            })
            .collect()
    };
    let frozen_train = freeze(&train)?;
    let frozen_dev = freeze(&dev)?;
    let cfg = TaggerConfig {
        labels: 3,
        ..Default::default()
    };
    Ok(crate::features::frozen_tagger_train(&frozen_train, &frozen_dev, &cfg, seed)?.dev_accuracy)
}

/// Pre-train one arm and evaluate it downstream: masked-token accuracy on
/// the cloze probes plus classification dev accuracy after fine-tuning.
fn run_arm(
    ctx: &AblationContext<'_>,
    spec: &AblationSpec,
    cloze_dev: &str,
) -> Result<MetricReport> {
    let mut config = ctx.config.clone();
    if let Some(mode) = spec.overrides.attention_mode {
        config.attention_mode = mode;
    }
    let mut opts = ctx.pretrain.clone();
    if let Some(obj) = spec.overrides.objective {
        opts.objective = obj;
    }
    if let Some(policy) = spec.overrides.policy {
        opts.policy = policy;
    }
    let (ckpt, _) = ctx.pretrain_cached(&config, &opts, &[])?;
    let model = PretrainModel::<f32>::from_checkpoint(&ckpt)?;
    let cases = eval::parse_cloze_cases(cloze_dev, ctx.vocab)?;
    let cloze = eval::cloze_accuracy(&model, &cases, ctx.vocab)?;
    // The attention constraint carries into fine-tuning via the checkpoint
    // config, so the causal arm stays causal downstream.
    let cls = cls_dataset_from_fixture(ctx.vocab, config.max_positions)?;
    let ft = finetune(&ckpt, &cls, &ctx.finetune, ctx.seed)?;
    Ok(MetricReport::new(
        &spec.name,
        vec![
            ("cloze_accuracy".into(), cloze),
            ("cls_dev_accuracy".into(), ft.dev_metric),
        ],
        cases.len(),
        ctx.seed,
        eval::config_hash(&config),
    ))
}

/// Run named pre-training arms (possibly in parallel waves bounded by
/// `workers`), reporting each arm through `sink` as soon as its wave lands.
pub fn run_arms(
    ctx: &AblationContext<'_>,
    specs: &[AblationSpec],
    cloze_dev: &str,
    sink: &mut dyn FnMut(&str, &MetricReport) -> Result<()>,
) -> Result<AblationOutcome> {
    let mut rows = Vec::with_capacity(specs.len());
    let workers = ctx.workers.max(1);
    for wave in specs.chunks(workers) {
        let results: Vec<Result<MetricReport>> = if workers == 1 || wave.len() == 1 {
            wave.iter().map(|s| run_arm(ctx, s, cloze_dev)).collect()
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|s| scope.spawn(move || run_arm(ctx, s, cloze_dev)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("arm thread")).collect()
            })
        };
        for (spec, result) in wave.iter().zip(results) {
            let report = result?;
            sink(&spec.name, &report)?;
            rows.push((spec.name.clone(), report));
        }
    }
    Ok(AblationOutcome::Arms(rows))
}

/// Masking-strategy grid: one pre-train + fine-tune + feature-based row per
/// (mask, same, rnd) triple.
pub fn run_mask_grid(
    ctx: &AblationContext<'_>,
    triples: &[(f64, f64, f64)],
    sink: &mut dyn FnMut(&str, &MetricReport) -> Result<()>,
) -> Result<AblationOutcome> {
    let mut rows = Vec::with_capacity(triples.len());
    for &(mask, same, rnd) in triples {
        let policy = MaskingPolicy::new(ctx.pretrain.policy.select_rate, mask, same, rnd)?;
        let mut opts = ctx.pretrain.clone();
        opts.policy = policy;
        let (ckpt, _) = ctx.pretrain_cached(&ctx.config, &opts, &[])?;
        let cls = cls_dataset_from_fixture(ctx.vocab, ctx.config.max_positions)?;
        let ft = finetune(&ckpt, &cls, &ctx.finetune, ctx.seed)?;
        let feature = feature_based_tag_accuracy(
            &ckpt,
            ctx.vocab,
            &FeatureStrategy::ConcatLastFour,
            ctx.seed,
        )?;
        let row = MaskGridRow {
            mask,
            same,
            rnd,
            finetune_accuracy: ft.dev_metric,
            feature_accuracy: feature,
        };
        let report = MetricReport::new(
            &format!("mask-{:.0}-{:.0}-{:.0}", mask * 100.0, same * 100.0, rnd * 100.0),
            vec![
                ("finetune_accuracy".into(), row.finetune_accuracy),
                ("feature_accuracy".into(), row.feature_accuracy),
            ],
            0,
            ctx.seed,
            eval::config_hash(&ctx.config),
        );
        sink(&report.task.clone(), &report)?;
        rows.push(row);
    }
    Ok(AblationOutcome::MaskGrid(rows))
}

/// Step ablation: checkpoints at each requested k (one shared pre-training
/// run), each fine-tuned independently on the classification fixture.
pub fn run_steps(
    ctx: &AblationContext<'_>,
    ks: &[u64],
    sink: &mut dyn FnMut(&str, &MetricReport) -> Result<()>,
) -> Result<AblationOutcome> {
    if ks.is_empty() {
        return Err(Error::Config("step ablation needs at least one k".into()));
    }
    let mut sorted: Vec<u64> = ks.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let max_k = *sorted.last().unwrap();
    let every = sorted.iter().copied().fold(sorted[0], gcd);
    let mut opts = ctx.pretrain.clone();
    opts.steps = max_k;
    opts.checkpoint_every = Some(every);
    let (final_ckpt, mut interval) = ctx.pretrain_cached(&ctx.config, &opts, &sorted)?;
    if !interval.iter().any(|(k, _)| *k == max_k) {
        interval.push((max_k, final_ckpt));
    }
    let mut points = Vec::with_capacity(sorted.len());
    for &k in &sorted {
        let ckpt = &interval
            .iter()
            .find(|(step, _)| *step == k)
            .ok_or_else(|| Error::Data(format!("no checkpoint captured at step {}", k)))?
            .1;
        let cls = cls_dataset_from_fixture(ctx.vocab, ctx.config.max_positions)?;
        let ft = finetune(ckpt, &cls, &ctx.finetune, ctx.seed)?;
        let point = StepPoint {
            k,
            accuracy: ft.dev_metric,
        };
        let report = MetricReport::new(
            &format!("steps-{}", k),
            vec![("cls_dev_accuracy".into(), point.accuracy)],
            0,
            ctx.seed,
            eval::config_hash(&ctx.config),
        );
        sink(&report.task.clone(), &report)?;
        points.push(point);
    }
    Ok(AblationOutcome::Steps(points))
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// The bidirectionality comparison behind the headline property: pre-train
/// the masked-token arm and the left-to-right arm on the same cloze corpus
/// and score both on masked-token dev accuracy.
pub fn bidirectionality_gap(
    base_config: &ModelConfig,
    pretrain_opts: &PretrainOptions,
    seed: u64,
    cache_dir: Option<&Path>,
) -> Result<(f64, f64)> {
    let vocab = Vocab::from_lines(fixtures::vocab_text().lines().map(|l| l.to_string()))?;
    let docs = parse_corpus(&fixtures::cloze_corpus(), &vocab, TokenizerConfig::default())?;
    let ctx = AblationContext {
        vocab: &vocab,
        docs: &docs,
        config: base_config.clone(),
        pretrain: pretrain_opts.clone(),
        finetune: FinetuneOptions::default(),
        seed,
        cache_dir: cache_dir.map(|p| p.to_path_buf()),
        workers: 1,
    };
    let mlm_spec = AblationSpec::named("no-nsp")?;
    let ltr_spec = AblationSpec::named("ltr-no-nsp")?;
    let cloze_dev = fixtures::cloze_dev();
    let cases = eval::parse_cloze_cases(&cloze_dev, &vocab)?;

    let run = |spec: &AblationSpec| -> Result<f64> {
        let mut config = ctx.config.clone();
        config.attention_mode = spec.overrides.attention_mode.unwrap();
        let mut opts = ctx.pretrain.clone();
        opts.objective = spec.overrides.objective.unwrap();
        let (ckpt, _) = ctx.pretrain_cached(&config, &opts, &[])?;
        let model = PretrainModel::<f32>::from_checkpoint(&ckpt)?;
        eval::cloze_accuracy(&model, &cases, &vocab)
    };
    Ok((run(&mlm_spec)?, run(&ltr_spec)?))
}
