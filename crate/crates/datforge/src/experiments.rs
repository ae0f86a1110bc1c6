//! Desk-scale experiment runners.
//!
//! Each runner builds a synthetic language family, pretrains one shared base
//! model, trains the adapters its design calls for, scores them on held-out
//! test corpora, and writes a fixed set of report files under the spec's
//! output directory:
//!
//! - `manifest.json` — the spec echo (minus the output directory), the base
//!   fingerprint, and the list of report files
//! - `report.csv` — one row per (run, task) in the pinned schema
//! - one kind-specific file (`curves.json`, `grid.csv` + `asymmetry.json`,
//!   `anchor.json`, `summary.json`, or `ranks.json`)
//! - `runs.json` — loss bookkeeping for every training job
//! - `bundles/` — the base checkpoint plus every adapter pool on disk
//! - `timings.json` — wall-clock phases; the only file allowed to differ
//!   between reruns, everything else is byte-reproducible from (spec, seed)
//!
//! Training jobs are independent and run on the rayon pool; every job's PRNG
//! stream is derived from (seed, task set), never from scheduling order, so
//! reports do not depend on the worker count.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterBundle;
use crate::error::{Error, Result};
use crate::evaluation::{
    asymmetry_report, delta_metric, merge_degradation, rows_to_csv, score_task, AsymmetryReport,
    Degradation, DeltaRecord, ReportRow, Score, Verdict,
};
use crate::merging::MergeConfig;
use crate::registry::{Direction, Registry, TranslationTask, ENGLISH};
use crate::routing::{pool_size, save_pool, AdapterPool, PoolMode};
use crate::synth::{build_languages, gen_corpus, Split, SynthSpec};
use crate::toymodel::{BaseModel, ModelConfig};
use crate::training::{
    compress_pool_datm, pretrain_base, strategy_bundles, train_adapter, CorpusMap, RunStats,
    Strategy, TrainConfig,
};
use crate::vocab::Vocab;

/// Which experiment design to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    LanguageSweep,
    StrategyComparison,
    AnchorSet,
    DatVsDatm,
    RankSweep,
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ExperimentKind::LanguageSweep => "language-sweep",
            ExperimentKind::StrategyComparison => "strategy-comparison",
            ExperimentKind::AnchorSet => "anchor-set",
            ExperimentKind::DatVsDatm => "dat-vs-datm",
            ExperimentKind::RankSweep => "rank-sweep",
        };
        write!(f, "{s}")
    }
}

/// Base-model shape knobs exposed to experiment specs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_n_layers")]
    pub n_layers: usize,
    #[serde(default = "default_max_seq")]
    pub max_seq: usize,
}

fn default_d_model() -> usize {
    64
}
fn default_n_layers() -> usize {
    2
}
fn default_max_seq() -> usize {
    48
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            d_model: default_d_model(),
            n_layers: default_n_layers(),
            max_seq: default_max_seq(),
        }
    }
}

fn default_kind() -> ExperimentKind {
    ExperimentKind::DatVsDatm
}
fn default_pretrain_steps() -> usize {
    1000
}
fn default_step_budget() -> usize {
    200
}
fn default_language_counts() -> Vec<usize> {
    vec![1, 3, 6, 12]
}
fn default_anchor_supersets() -> Vec<usize> {
    vec![3, 6, 12]
}
fn default_ranks() -> Vec<u32> {
    vec![16, 32]
}

/// Everything an experiment needs, loadable from one JSON file.
///
/// `output_dir` is deliberately skipped when serializing so the manifest echo
/// is path-free: running the same spec into two different directories still
/// produces byte-identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Which runner consumes the spec. The CLI sets this from its subcommand,
    /// so config files may omit it; dat-vs-datm is the headline default.
    #[serde(default = "default_kind")]
    pub kind: ExperimentKind,
    #[serde(default)]
    pub synth: SynthSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub merge: MergeConfig,
    #[serde(default)]
    pub model: ModelShape,
    /// Full-parameter pretraining steps for the shared base (0 skips it).
    #[serde(default = "default_pretrain_steps")]
    pub pretrain_steps: usize,
    /// Peak pretraining learning rate; falls back to `train.lr_max`.
    #[serde(default)]
    pub pretrain_lr_max: Option<f64>,
    /// Rough optimizer-step budget per adapter job: each job rounds it to
    /// whole epochs (at least one). 0 means "use `train.epochs` as given".
    #[serde(default = "default_step_budget")]
    pub step_budget: usize,
    /// Language-sweep subset sizes, taken as prefixes of the registry order.
    #[serde(default = "default_language_counts")]
    pub language_counts: Vec<usize>,
    /// Anchor languages; empty means "the members of group 1".
    #[serde(default)]
    pub anchor: Vec<String>,
    /// Superset sizes for the anchor experiment, also registry prefixes.
    #[serde(default = "default_anchor_supersets")]
    pub anchor_supersets: Vec<usize>,
    /// LoRA ranks for the rank sweep.
    #[serde(default = "default_ranks")]
    pub ranks: Vec<u32>,
    #[serde(default, skip_serializing)]
    pub output_dir: PathBuf,
}

impl ExperimentSpec {
    pub fn new(kind: ExperimentKind, output_dir: PathBuf) -> ExperimentSpec {
        ExperimentSpec {
            kind,
            synth: SynthSpec::default(),
            train: TrainConfig::default(),
            merge: MergeConfig::default(),
            model: ModelShape::default(),
            pretrain_steps: default_pretrain_steps(),
            pretrain_lr_max: None,
            step_budget: default_step_budget(),
            language_counts: default_language_counts(),
            anchor: Vec::new(),
            anchor_supersets: default_anchor_supersets(),
            ranks: default_ranks(),
            output_dir,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentSpec> {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("experiment spec: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        if !(self.merge.density > 0.0 && self.merge.density <= 1.0) {
            return Err(Error::BadDensity(self.merge.density));
        }
        if !(0.0..1.0).contains(&self.merge.drop_p) {
            return Err(Error::BadProbability(self.merge.drop_p));
        }
        if !self.merge.lambda.is_finite() || self.merge.lambda <= 0.0 {
            return Err(Error::Validation(format!(
                "merge lambda must be positive and finite, got {}",
                self.merge.lambda
            )));
        }
        if let Some(lr) = self.pretrain_lr_max {
            if !lr.is_finite() || lr <= 0.0 {
                return Err(Error::Validation(format!(
                    "pretrain_lr_max must be positive and finite, got {lr}"
                )));
            }
        }
        if self.model.d_model == 0 || self.model.n_layers == 0 {
            return Err(Error::Validation(
                "model shape needs d_model >= 1 and n_layers >= 1".into(),
            ));
        }
        // A pair encodes as tag + src + sep + tgt + eos.
        let need = 2 * self.synth.sent_len_range[1] + 3;
        if self.model.max_seq < need {
            return Err(Error::Validation(format!(
                "max_seq {} cannot hold a sentence pair of length {} ({need} tokens)",
                self.model.max_seq, self.synth.sent_len_range[1]
            )));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::BadConfig("experiment needs an output directory".into()));
        }
        let n_l = self.synth.n_groups * self.synth.langs_per_group;
        match self.kind {
            ExperimentKind::LanguageSweep => {
                ascending_counts(&self.language_counts, n_l, "language_counts")
            }
            ExperimentKind::AnchorSet => {
                ascending_counts(&self.anchor_supersets, n_l, "anchor_supersets")
            }
            ExperimentKind::RankSweep => {
                if self.ranks.is_empty() {
                    return Err(Error::EmptyInput("rank sweep needs at least one rank".into()));
                }
                if self.ranks.iter().any(|&r| r == 0) {
                    return Err(Error::Validation("LoRA ranks must be >= 1".into()));
                }
                if self.ranks.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Validation("ranks must be strictly ascending".into()));
                }
                Ok(())
            }
            ExperimentKind::StrategyComparison | ExperimentKind::DatVsDatm => Ok(()),
        }
    }
}

/// Runners are callable directly; a spec of the wrong kind is a config bug
/// worth refusing rather than silently re-labelling.
fn expect_kind(spec: &ExperimentSpec, kind: ExperimentKind) -> Result<()> {
    if spec.kind != kind {
        return Err(Error::BadConfig(format!(
            "spec kind is {}, expected {kind}",
            spec.kind
        )));
    }
    Ok(())
}

fn ascending_counts(xs: &[usize], max: usize, what: &str) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::EmptyInput(format!("{what} must not be empty")));
    }
    if xs[0] == 0 {
        return Err(Error::Validation(format!("{what} entries must be >= 1")));
    }
    if xs.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Validation(format!("{what} must be strictly ascending")));
    }
    if *xs.last().unwrap() > max {
        return Err(Error::Validation(format!(
            "{what} peaks at {} but the registry only generates {max} languages",
            xs.last().unwrap()
        )));
    }
    Ok(())
}

/// The shared setup every runner starts from: registry, vocab, corpora for
/// every task and split, and the pretrained base.
pub struct ExperimentContext {
    pub registry: Registry,
    pub vocab: Vocab,
    pub base: BaseModel,
    pub train_corpora: CorpusMap,
    pub test_corpora: CorpusMap,
    pub pretrain_curve: Vec<f64>,
    pub pretrain_wall_s: f64,
}

/// Registry, vocab, model config and both corpus splits for a spec.
fn build_world(
    spec: &ExperimentSpec,
) -> Result<(Registry, Vocab, ModelConfig, CorpusMap, CorpusMap)> {
    spec.validate()?;
    let (registry, languages) = build_languages(&spec.synth)?;
    let vocab = Vocab::new(spec.synth.content_vocab, &registry);
    let mut mcfg = ModelConfig::for_vocab(vocab.size());
    mcfg.d_model = spec.model.d_model;
    mcfg.n_layers = spec.model.n_layers;
    mcfg.max_seq = spec.model.max_seq;

    let mut train_corpora: CorpusMap = BTreeMap::new();
    let mut test_corpora: CorpusMap = BTreeMap::new();
    for lang in languages.values() {
        for direction in [Direction::IntoEnglish, Direction::FromEnglish] {
            let tr = gen_corpus(&spec.synth, lang, direction, Split::Train)?;
            train_corpora.insert(tr.task.clone(), tr);
            let te = gen_corpus(&spec.synth, lang, direction, Split::Test)?;
            test_corpora.insert(te.task.clone(), te);
        }
    }
    Ok((registry, vocab, mcfg, train_corpora, test_corpora))
}

pub fn prepare(spec: &ExperimentSpec) -> Result<ExperimentContext> {
    let (registry, vocab, mcfg, train_corpora, test_corpora) = build_world(spec)?;
    let mut pre_cfg = spec.train.clone();
    if let Some(lr) = spec.pretrain_lr_max {
        pre_cfg.lr_max = lr;
    }
    let out = pretrain_base(&mcfg, &vocab, &train_corpora, &pre_cfg, spec.pretrain_steps)?;
    Ok(ExperimentContext {
        registry,
        vocab,
        base: out.model,
        train_corpora,
        test_corpora,
        pretrain_curve: out.curve,
        pretrain_wall_s: out.wall_time_s,
    })
}

/// Like [`prepare`], but around an already-trained base (say, one loaded from
/// a checkpoint) instead of pretraining a fresh one. The base must have been
/// built for the same vocabulary.
pub fn prepare_with_base(spec: &ExperimentSpec, base: BaseModel) -> Result<ExperimentContext> {
    let (registry, vocab, mcfg, train_corpora, test_corpora) = build_world(spec)?;
    if base.cfg.vocab_size != mcfg.vocab_size {
        return Err(Error::Validation(format!(
            "base model has vocab size {}, this spec needs {}",
            base.cfg.vocab_size, mcfg.vocab_size
        )));
    }
    Ok(ExperimentContext {
        registry,
        vocab,
        base,
        train_corpora,
        test_corpora,
        pretrain_curve: Vec::new(),
        pretrain_wall_s: 0.0,
    })
}

/// Clone the training config with `epochs` set so the job lands near the
/// step budget: round(budget / steps-per-epoch), at least one epoch.
fn budgeted(
    base_cfg: &TrainConfig,
    step_budget: usize,
    tasks: &BTreeSet<TranslationTask>,
    corpora: &CorpusMap,
) -> Result<TrainConfig> {
    let mut cfg = base_cfg.clone();
    if step_budget == 0 {
        return Ok(cfg);
    }
    let mut n = 0usize;
    for t in tasks {
        let c = corpora
            .get(t)
            .ok_or_else(|| Error::MissingCorpus(format!("no training corpus for {t}")))?;
        n += c.len();
    }
    if n == 0 {
        return Err(Error::EmptyInput("cannot budget a job with no pairs".into()));
    }
    let per_epoch = n.div_ceil(cfg.batch_size);
    cfg.epochs = ((step_budget as f64 / per_epoch as f64).round() as usize).max(1);
    Ok(cfg)
}

/// Train a batch of adapter jobs in parallel, in deterministic input order.
fn train_jobs(
    cfg_base: &TrainConfig,
    step_budget: usize,
    jobs: &[(String, BTreeSet<TranslationTask>)],
    ctx: &ExperimentContext,
) -> Result<Vec<(AdapterBundle, RunStats)>> {
    let prepared: Vec<(&String, &BTreeSet<TranslationTask>, TrainConfig)> = jobs
        .iter()
        .map(|(id, tasks)| Ok((id, tasks, budgeted(cfg_base, step_budget, tasks, &ctx.train_corpora)?)))
        .collect::<Result<_>>()?;
    prepared
        .par_iter()
        .map(|(id, tasks, cfg)| train_adapter(&ctx.base, &ctx.vocab, id, tasks, &ctx.train_corpora, cfg))
        .collect()
}

fn pool_from(mode: PoolMode, bundles: Vec<AdapterBundle>) -> Result<AdapterPool> {
    let mut entries = BTreeMap::new();
    for b in bundles {
        entries.insert(b.meta.id.clone(), b);
    }
    AdapterPool::new(mode, entries)
}

/// Train a whole pool (one job per bundle id) against the step budget.
pub fn train_pool(
    mode: PoolMode,
    jobs: &[(String, BTreeSet<TranslationTask>)],
    ctx: &ExperimentContext,
    spec: &ExperimentSpec,
) -> Result<(AdapterPool, Vec<RunStats>)> {
    let results = train_jobs(&spec.train, spec.step_budget, jobs, ctx)?;
    let mut bundles = Vec::with_capacity(results.len());
    let mut stats = Vec::with_capacity(results.len());
    for (b, s) in results {
        bundles.push(b);
        stats.push(s);
    }
    Ok((pool_from(mode, bundles)?, stats))
}

/// A single-bundle multilingual pool; the bundle is renamed to the canonical
/// pool-local id "mul:all" so routing finds it.
fn mul_pool(mut bundle: AdapterBundle) -> Result<AdapterPool> {
    bundle.meta.id = "mul:all".to_string();
    pool_from(PoolMode::Baseline(Strategy::Multilingual), vec![bundle])
}

/// Score one pool on a list of tasks, in parallel over tasks.
pub fn score_map(
    pool: &AdapterPool,
    tasks: &[TranslationTask],
    ctx: &ExperimentContext,
) -> Result<BTreeMap<TranslationTask, Score>> {
    let scored: Vec<(TranslationTask, Score)> = tasks
        .par_iter()
        .map(|t| -> Result<(TranslationTask, Score)> {
            let corpus = ctx
                .test_corpora
                .get(t)
                .ok_or_else(|| Error::MissingCorpus(format!("no test corpus for {t}")))?;
            let score = score_task(pool, &ctx.base, &ctx.vocab, &ctx.registry, corpus)?;
            Ok((t.clone(), score))
        })
        .collect::<Result<_>>()?;
    Ok(scored.into_iter().collect())
}

fn report_row(
    ctx: &ExperimentContext,
    run_id: &str,
    strategy: &str,
    task: &TranslationTask,
    score: Score,
    delta: f64,
    verdict: Verdict,
) -> Result<ReportRow> {
    let foreign = task.foreign();
    Ok(ReportRow {
        run_id: run_id.to_string(),
        task: task.to_string(),
        direction: task.direction(),
        group: ctx.registry.group_of(foreign)?,
        resource: ctx.registry.get(foreign)?.resource,
        strategy: strategy.to_string(),
        score,
        delta,
        verdict,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for x in xs {
        sum += x;
        n += 1;
    }
    sum / n as f64
}

fn mean_score(scores: &BTreeMap<TranslationTask, Score>, tasks: &[TranslationTask]) -> Score {
    let n = tasks.len() as f64;
    let mut acc = Score {
        token_accuracy: 0.0,
        exact_match: 0.0,
        bleu: 0.0,
    };
    for t in tasks {
        let s = scores[t];
        acc.token_accuracy += s.token_accuracy;
        acc.exact_match += s.exact_match;
        acc.bleu += s.bleu;
    }
    acc.token_accuracy /= n;
    acc.exact_match /= n;
    acc.bleu /= n;
    acc
}

// ---------------------------------------------------------------------------
// report files

/// Echo of the run, written last so its file list is complete.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub kind: ExperimentKind,
    pub spec: ExperimentSpec,
    /// Hex fingerprint of the pretrained base the adapters sit on.
    pub base_fingerprint: String,
    pub n_languages: usize,
    pub n_groups: u8,
    /// Deterministic report files, relative to the output directory.
    pub files: Vec<String>,
}

/// Loss bookkeeping for one training job; wall times live in timings.json.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub id: String,
    pub tasks: Vec<String>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
}

impl RunSummary {
    pub fn labeled(label: String, s: &RunStats) -> RunSummary {
        RunSummary {
            id: label,
            tasks: s.tasks.clone(),
            initial_loss: s.initial_loss,
            final_loss: s.final_loss,
            steps: s.steps,
        }
    }

    pub fn from_stats(s: &RunStats) -> RunSummary {
        RunSummary::labeled(s.id.clone(), s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub steps: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunsFile {
    pub pretrain: PretrainSummary,
    pub runs: Vec<RunSummary>,
}

#[derive(Debug, Clone, Serialize)]
struct TimingsFile {
    pretrain_s: f64,
    train_s: f64,
    score_s: f64,
    total_s: f64,
}

/// Small deterministic-output helper around an experiment directory.
struct Reporter<'a> {
    dir: &'a Path,
    files: Vec<String>,
}

impl<'a> Reporter<'a> {
    fn new(dir: &'a Path) -> Result<Reporter<'a>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Reporter {
            dir,
            files: Vec::new(),
        })
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| Error::Format(format!("serializing {name}: {e}")))?;
        text.push('\n');
        self.write_text(name, &text)
    }

    fn save_pools(
        &self,
        ctx: &ExperimentContext,
        pools: &[(&str, &AdapterPool)],
    ) -> Result<()> {
        let bundles = self.dir.join("bundles");
        std::fs::create_dir_all(&bundles).map_err(|e| Error::io(&bundles, e))?;
        ctx.base.save(bundles.join("base.model"))?;
        for (label, pool) in pools {
            save_pool(pool, &ctx.registry, "../base.model", &bundles.join(label))?;
        }
        Ok(())
    }

    fn runs_json(&mut self, ctx: &ExperimentContext, runs: Vec<RunSummary>) -> Result<()> {
        let file = RunsFile {
            pretrain: PretrainSummary {
                steps: ctx.pretrain_curve.len(),
                initial_loss: ctx.pretrain_curve.first().copied(),
                final_loss: ctx.pretrain_curve.last().copied(),
            },
            runs,
        };
        self.write_json("runs.json", &file)
    }

    /// manifest.json lists the deterministic files; timings.json is written
    /// alongside but deliberately left off the list.
    fn finish(
        mut self,
        spec: &ExperimentSpec,
        ctx: &ExperimentContext,
        train_s: f64,
        score_s: f64,
        started: Instant,
    ) -> Result<ExperimentManifest> {
        let manifest = ExperimentManifest {
            kind: spec.kind,
            spec: spec.clone(),
            base_fingerprint: format!("{:016x}", ctx.base.fingerprint()),
            n_languages: ctx.registry.n_non_english(),
            n_groups: ctx.registry.n_groups(),
            files: self.files.clone(),
        };
        self.write_json("manifest.json", &manifest)?;
        let timings = TimingsFile {
            pretrain_s: ctx.pretrain_wall_s,
            train_s,
            score_s,
            total_s: started.elapsed().as_secs_f64(),
        };
        let mut text = serde_json::to_string_pretty(&timings).expect("timings serialize");
        text.push('\n');
        let path = self.dir.join("timings.json");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

// ---------------------------------------------------------------------------
// language sweep

/// One point of the interference curves: mean test BLEU over the first `k`
/// languages for one direction, under mixed vs per-task training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub k: usize,
    pub direction: Direction,
    pub mean_multilingual: f64,
    pub mean_separate: f64,
    /// mean_separate − mean_multilingual; positive means mixing hurt.
    pub delta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepAsymmetry {
    pub k: usize,
    pub report: AsymmetryReport,
}

pub struct SweepOutput {
    pub manifest: ExperimentManifest,
    pub points: Vec<SweepPoint>,
    pub asymmetry: Vec<SweepAsymmetry>,
    pub rows: Vec<ReportRow>,
}

/// Fig-2-style sweep: for each count k, compare per-direction multilingual
/// training over the first k registry languages against per-task training.
/// The separate bundles do not depend on k and are trained once.
pub fn run_language_sweep(spec: &ExperimentSpec) -> Result<SweepOutput> {
    let started = Instant::now();
    expect_kind(spec, ExperimentKind::LanguageSweep)?;
    let ctx = prepare(spec)?;
    let counts = &spec.language_counts;
    let max_k = *counts.last().unwrap();
    let langs: Vec<String> = ctx
        .registry
        .non_english()
        .take(max_k)
        .map(|l| l.code.clone())
        .collect();
    let dir_task = |code: &str, d: Direction| -> Result<TranslationTask> {
        match d {
            Direction::IntoEnglish => ctx.registry.task(code, ENGLISH),
            Direction::FromEnglish => ctx.registry.task(ENGLISH, code),
        }
    };

    // One combined job list: all separate bundles first, then one mixed job
    // per (k, direction); ids stay unique so the stats stay readable.
    let mut jobs: Vec<(String, BTreeSet<TranslationTask>)> = Vec::new();
    for code in &langs {
        for d in [Direction::IntoEnglish, Direction::FromEnglish] {
            let task = dir_task(code, d)?;
            jobs.push((format!("sep:{task}"), BTreeSet::from([task])));
        }
    }
    let n_sep = jobs.len();
    let mut mul_keys = Vec::new();
    for &k in counts {
        for d in [Direction::IntoEnglish, Direction::FromEnglish] {
            let tasks: BTreeSet<TranslationTask> = langs[..k]
                .iter()
                .map(|c| dir_task(c, d))
                .collect::<Result<_>>()?;
            let id = format!("mul:k{k}:{d}");
            jobs.push((id.clone(), tasks));
            mul_keys.push((k, d, id));
        }
    }

    let t_train = Instant::now();
    let mut results = train_jobs(&spec.train, spec.step_budget, &jobs, &ctx)?;
    let train_s = t_train.elapsed().as_secs_f64();
    let runs: Vec<RunSummary> = results.iter().map(|(_, s)| RunSummary::from_stats(s)).collect();

    let mul_results = results.split_off(n_sep);
    let sep_pool = pool_from(
        PoolMode::Baseline(Strategy::Separate),
        results.into_iter().map(|(b, _)| b).collect(),
    )?;
    let mut mul_pools: BTreeMap<(usize, Direction), AdapterPool> = BTreeMap::new();
    for ((b, _), (k, d, _)) in mul_results.into_iter().zip(&mul_keys) {
        mul_pools.insert((*k, *d), mul_pool(b)?);
    }

    let t_score = Instant::now();
    let mut all_tasks = Vec::new();
    for c in &langs {
        for d in [Direction::IntoEnglish, Direction::FromEnglish] {
            all_tasks.push(dir_task(c, d)?);
        }
    }
    let sep_scores = score_map(&sep_pool, &all_tasks, &ctx)?;

    let mut points = Vec::new();
    let mut asymmetry = Vec::new();
    let mut rows = Vec::new();
    for &k in counts {
        let mut records = Vec::new();
        for d in [Direction::IntoEnglish, Direction::FromEnglish] {
            let tasks: Vec<TranslationTask> = langs[..k]
                .iter()
                .map(|c| dir_task(c, d))
                .collect::<Result<_>>()?;
            let mul_scores = score_map(&mul_pools[&(k, d)], &tasks, &ctx)?;
            for t in &tasks {
                let s = sep_scores[t];
                let m = mul_scores[t];
                let (delta, verdict) = delta_metric(s.bleu, m.bleu, 0.0)?;
                rows.push(report_row(&ctx, &format!("k{k}:mul"), "multilingual", t, m, delta, verdict)?);
                rows.push(report_row(&ctx, &format!("k{k}:sep"), "separate", t, s, delta, verdict)?);
                records.push(DeltaRecord::new(t.clone(), s.bleu, m.bleu, 0.0)?);
            }
            let mean_multilingual = mean(tasks.iter().map(|t| mul_scores[t].bleu));
            let mean_separate = mean(tasks.iter().map(|t| sep_scores[t].bleu));
            points.push(SweepPoint {
                k,
                direction: d,
                mean_multilingual,
                mean_separate,
                delta: mean_separate - mean_multilingual,
            });
        }
        asymmetry.push(SweepAsymmetry {
            k,
            report: asymmetry_report(&records, &ctx.registry)?,
        });
    }
    let score_s = t_score.elapsed().as_secs_f64();

    let mut rep = Reporter::new(&spec.output_dir)?;
    rep.write_text("report.csv", &rows_to_csv(&rows))?;
    rep.write_json("curves.json", &points)?;
    rep.write_json("asymmetry.json", &asymmetry)?;
    rep.runs_json(&ctx, runs)?;
    let mut pools: Vec<(String, &AdapterPool)> = vec![("sep".to_string(), &sep_pool)];
    for ((k, d), pool) in &mul_pools {
        pools.push((format!("mul-k{k}-{d}"), pool));
    }
    let pool_refs: Vec<(&str, &AdapterPool)> =
        pools.iter().map(|(l, p)| (l.as_str(), *p)).collect();
    rep.save_pools(&ctx, &pool_refs)?;
    let manifest = rep.finish(spec, &ctx, train_s, score_s, started)?;
    Ok(SweepOutput {
        manifest,
        points,
        asymmetry,
        rows,
    })
}

// ---------------------------------------------------------------------------
// strategy comparison

pub struct ComparisonOutput {
    pub manifest: ExperimentManifest,
    /// Mean test BLEU keyed by (group, direction, strategy display name).
    pub grid: BTreeMap<(u8, Direction, String), f64>,
    pub asymmetry: AsymmetryReport,
    pub rows: Vec<ReportRow>,
}

const GRID_CSV_HEADER: &str = "group,direction,multilingual,group-multilingual,separate";

/// Table-2-style comparison: the three baseline strategies on the full
/// registry, reported per group × direction.
pub fn run_strategy_comparison(spec: &ExperimentSpec) -> Result<ComparisonOutput> {
    let started = Instant::now();
    expect_kind(spec, ExperimentKind::StrategyComparison)?;
    let ctx = prepare(spec)?;
    let strategies = [
        Strategy::Multilingual,
        Strategy::GroupMultilingual,
        Strategy::Separate,
    ];

    let t_train = Instant::now();
    let mut pools = Vec::new();
    let mut runs = Vec::new();
    for strat in strategies {
        let jobs = strategy_bundles(strat, &ctx.registry);
        let (pool, stats) = train_pool(PoolMode::Baseline(strat), &jobs, &ctx, spec)?;
        runs.extend(stats.iter().map(RunSummary::from_stats));
        pools.push((strat, pool));
    }
    let train_s = t_train.elapsed().as_secs_f64();

    let t_score = Instant::now();
    let all_tasks = ctx.registry.all_tasks();
    let mut scores: Vec<BTreeMap<TranslationTask, Score>> = Vec::new();
    for (_, pool) in &pools {
        scores.push(score_map(pool, &all_tasks, &ctx)?);
    }
    let score_s = t_score.elapsed().as_secs_f64();
    let (mul_scores, sep_scores) = (&scores[0], &scores[2]);

    // Per-task interference stat, shared by every row of the same task.
    let mut deltas: BTreeMap<TranslationTask, (f64, Verdict)> = BTreeMap::new();
    let mut records = Vec::new();
    for t in &all_tasks {
        let (d, v) = delta_metric(sep_scores[t].bleu, mul_scores[t].bleu, 0.0)?;
        deltas.insert(t.clone(), (d, v));
        records.push(DeltaRecord::new(t.clone(), sep_scores[t].bleu, mul_scores[t].bleu, 0.0)?);
    }
    let asymmetry = asymmetry_report(&records, &ctx.registry)?;

    let short = |s: Strategy| match s {
        Strategy::Multilingual => "mul",
        Strategy::GroupMultilingual => "gmx",
        Strategy::Separate => "sep",
        Strategy::DirectionAware => "dat",
    };
    let mut rows = Vec::new();
    for ((strat, _), sm) in pools.iter().zip(&scores) {
        for t in &all_tasks {
            let (d, v) = deltas[t];
            rows.push(report_row(&ctx, short(*strat), &strat.to_string(), t, sm[t], d, v)?);
        }
    }

    let mut grid = BTreeMap::new();
    let mut grid_csv = String::from(GRID_CSV_HEADER);
    grid_csv.push('\n');
    for g in 1..=ctx.registry.n_groups() {
        for d in [Direction::IntoEnglish, Direction::FromEnglish] {
            let tasks: Vec<TranslationTask> = ctx
                .registry
                .group_members(g)
                .iter()
                .map(|c| match d {
                    Direction::IntoEnglish => ctx.registry.task(c, ENGLISH),
                    Direction::FromEnglish => ctx.registry.task(ENGLISH, c),
                })
                .collect::<Result<_>>()?;
            let mut cells = Vec::new();
            for ((strat, _), sm) in pools.iter().zip(&scores) {
                let m = mean(tasks.iter().map(|t| sm[t].bleu));
                grid.insert((g, d, strat.to_string()), m);
                cells.push(crate::evaluation::fmt_metric(m));
            }
            grid_csv.push_str(&format!("{g},{d},{}\n", cells.join(",")));
        }
    }

    let mut rep = Reporter::new(&spec.output_dir)?;
    rep.write_text("report.csv", &rows_to_csv(&rows))?;
    rep.write_text("grid.csv", &grid_csv)?;
    rep.write_json("asymmetry.json", &asymmetry)?;
    rep.runs_json(&ctx, runs)?;
    let pool_refs: Vec<(&str, &AdapterPool)> = pools
        .iter()
        .map(|(s, p)| (short(*s), p))
        .collect();
    rep.save_pools(&ctx, &pool_refs)?;
    let manifest = rep.finish(spec, &ctx, train_s, score_s, started)?;
    Ok(ComparisonOutput {
        manifest,
        grid,
        asymmetry,
        rows,
    })
}

// ---------------------------------------------------------------------------
// anchor set

/// Mean anchor-task BLEU after multilingual training on one superset size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorRow {
    pub superset: usize,
    pub xx_en: f64,
    pub en_xx: f64,
}

pub struct AnchorOutput {
    pub manifest: ExperimentManifest,
    pub table: Vec<AnchorRow>,
    pub rows: Vec<ReportRow>,
}

/// Anchor experiment: train one mixed-direction multilingual bundle per
/// superset size (registry prefixes) and watch the anchor tasks' scores as
/// unrelated languages join the mix. Deltas are measured against the
/// smallest superset.
pub fn run_anchor(spec: &ExperimentSpec) -> Result<AnchorOutput> {
    let started = Instant::now();
    expect_kind(spec, ExperimentKind::AnchorSet)?;
    let ctx = prepare(spec)?;
    let anchor: Vec<String> = if spec.anchor.is_empty() {
        ctx.registry
            .group_members(1)
            .iter()
            .map(|s| s.to_string())
            .collect()
    } else {
        spec.anchor.clone()
    };
    for code in &anchor {
        ctx.registry.group_of(code)?; // rejects unknown codes and "en"
    }
    let langs: Vec<String> = ctx.registry.non_english().map(|l| l.code.clone()).collect();
    for &k in &spec.anchor_supersets {
        for code in &anchor {
            if !langs[..k].contains(code) {
                return Err(Error::AnchorNotCovered(format!(
                    "anchor language '{code}' is not among the first {k} registry languages"
                )));
            }
        }
    }

    let mut jobs = Vec::new();
    for &k in &spec.anchor_supersets {
        let mut tasks = BTreeSet::new();
        for code in &langs[..k] {
            tasks.insert(ctx.registry.task(code, ENGLISH)?);
            tasks.insert(ctx.registry.task(ENGLISH, code)?);
        }
        jobs.push((format!("mul:s{k}"), tasks));
    }
    let t_train = Instant::now();
    let results = train_jobs(&spec.train, spec.step_budget, &jobs, &ctx)?;
    let train_s = t_train.elapsed().as_secs_f64();
    let runs: Vec<RunSummary> = results.iter().map(|(_, s)| RunSummary::from_stats(s)).collect();

    let anchor_tasks_of = |d: Direction| -> Result<Vec<TranslationTask>> {
        anchor
            .iter()
            .map(|c| match d {
                Direction::IntoEnglish => ctx.registry.task(c, ENGLISH),
                Direction::FromEnglish => ctx.registry.task(ENGLISH, c),
            })
            .collect()
    };
    let into_tasks = anchor_tasks_of(Direction::IntoEnglish)?;
    let from_tasks = anchor_tasks_of(Direction::FromEnglish)?;
    let mut anchor_tasks = into_tasks.clone();
    anchor_tasks.extend(from_tasks.iter().cloned());

    let t_score = Instant::now();
    let mut pools = Vec::new();
    let mut per_k_scores = Vec::new();
    for ((b, _), &k) in results.into_iter().zip(&spec.anchor_supersets) {
        let pool = mul_pool(b)?;
        per_k_scores.push((k, score_map(&pool, &anchor_tasks, &ctx)?));
        pools.push((format!("mul-s{k}"), pool));
    }
    let score_s = t_score.elapsed().as_secs_f64();

    let reference = &per_k_scores[0].1;
    let mut table = Vec::new();
    let mut rows = Vec::new();
    for (k, scores) in &per_k_scores {
        for d in [Direction::IntoEnglish, Direction::FromEnglish] {
            let tasks = if d == Direction::IntoEnglish {
                &into_tasks
            } else {
                &from_tasks
            };
            for t in tasks {
                let (delta, verdict) = delta_metric(reference[t].bleu, scores[t].bleu, 0.0)?;
                rows.push(report_row(
                    &ctx,
                    &format!("s{k}:mul"),
                    "multilingual",
                    t,
                    scores[t],
                    delta,
                    verdict,
                )?);
            }
        }
        table.push(AnchorRow {
            superset: *k,
            xx_en: mean(into_tasks.iter().map(|t| scores[t].bleu)),
            en_xx: mean(from_tasks.iter().map(|t| scores[t].bleu)),
        });
    }

    let mut rep = Reporter::new(&spec.output_dir)?;
    rep.write_text("report.csv", &rows_to_csv(&rows))?;
    rep.write_json("anchor.json", &table)?;
    rep.runs_json(&ctx, runs)?;
    let pool_refs: Vec<(&str, &AdapterPool)> =
        pools.iter().map(|(l, p)| (l.as_str(), p)).collect();
    rep.save_pools(&ctx, &pool_refs)?;
    let manifest = rep.finish(spec, &ctx, train_s, score_s, started)?;
    Ok(AnchorOutput {
        manifest,
        table,
        rows,
    })
}

// ---------------------------------------------------------------------------
// dat vs datm

/// Headline numbers of the dat-vs-datm run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatVsDatmSummary {
    pub n_languages: usize,
    pub n_groups: u8,
    /// N_L + N_G by the size law.
    pub dat_pool_size: usize,
    /// 2·N_G by the size law.
    pub datm_pool_size: usize,
    pub dat_param_count: usize,
    pub datm_param_count: usize,
    /// Mean test BLEU per pool per direction.
    pub mean_bleu: BTreeMap<String, BTreeMap<Direction, f64>>,
    /// Score change per merged-away parameter, DAT pool → DATM pool.
    pub degradation: BTreeMap<Direction, Degradation>,
    /// En→XX over XX→En BLEU degradation; the En→XX bundles are carried
    /// over untouched, so this is 0 whenever merging costs anything at all.
    pub degradation_ratio_en_xx_over_xx_en: f64,
    /// Separate-vs-multilingual interference over all tasks.
    pub asymmetry: AsymmetryReport,
}

pub struct DatVsDatmOutput {
    pub manifest: ExperimentManifest,
    pub summary: DatVsDatmSummary,
    pub rows: Vec<ReportRow>,
    /// Per-pool per-task scores in row order: dat, datm, mul, gmx, sep.
    pub scores: Vec<(String, BTreeMap<TranslationTask, Score>)>,
}

/// The full pipeline: direction-aware pool, group-wise merged pool, and the
/// three baselines, all scored on every test corpus. The separate baseline
/// reuses DAT's per-language XX→En bundles outright — identical ids and task
/// sets train identical bundles, so retraining them would only burn time.
fn find_scores<'a>(
    scores: &'a [(String, BTreeMap<TranslationTask, Score>)],
    label: &str,
) -> &'a BTreeMap<TranslationTask, Score> {
    &scores.iter().find(|(l, _)| l == label).expect("pool label exists").1
}

pub fn run_dat_vs_datm(spec: &ExperimentSpec) -> Result<DatVsDatmOutput> {
    let started = Instant::now();
    expect_kind(spec, ExperimentKind::DatVsDatm)?;
    let ctx = prepare(spec)?;

    let t_train = Instant::now();
    let mut runs = Vec::new();

    let dat_jobs = strategy_bundles(Strategy::DirectionAware, &ctx.registry);
    let (dat_pool, dat_stats) = train_pool(PoolMode::Dat, &dat_jobs, &ctx, spec)?;
    runs.extend(dat_stats.iter().map(RunSummary::from_stats));
    dat_pool.check_size(&ctx.registry)?;

    let datm_pool = compress_pool_datm(&dat_pool, &ctx.registry, &spec.merge)?;
    datm_pool.check_size(&ctx.registry)?;

    let mul_jobs = strategy_bundles(Strategy::Multilingual, &ctx.registry);
    let (mul_pool_, mul_stats) = train_pool(PoolMode::Baseline(Strategy::Multilingual), &mul_jobs, &ctx, spec)?;
    runs.extend(mul_stats.iter().map(RunSummary::from_stats));

    let gmx_jobs = strategy_bundles(Strategy::GroupMultilingual, &ctx.registry);
    let (gmx_pool, gmx_stats) = train_pool(PoolMode::Baseline(Strategy::GroupMultilingual), &gmx_jobs, &ctx, spec)?;
    runs.extend(gmx_stats.iter().map(RunSummary::from_stats));

    // Separate baseline: XX→En bundles shared with DAT, En→XX trained here.
    let mut sep_bundles: Vec<AdapterBundle> = dat_pool
        .entries()
        .iter()
        .filter(|(id, _)| id.starts_with("sep:"))
        .map(|(_, b)| b.clone())
        .collect();
    let en_jobs: Vec<(String, BTreeSet<TranslationTask>)> = ctx
        .registry
        .non_english()
        .map(|l| -> Result<_> {
            let task = ctx.registry.task(ENGLISH, &l.code)?;
            Ok((format!("sep:{task}"), BTreeSet::from([task])))
        })
        .collect::<Result<_>>()?;
    let en_results = train_jobs(&spec.train, spec.step_budget, &en_jobs, &ctx)?;
    runs.extend(en_results.iter().map(|(_, s)| RunSummary::from_stats(s)));
    sep_bundles.extend(en_results.into_iter().map(|(b, _)| b));
    let sep_pool = pool_from(PoolMode::Baseline(Strategy::Separate), sep_bundles)?;
    let train_s = t_train.elapsed().as_secs_f64();

    let pools: Vec<(&str, &str, &AdapterPool)> = vec![
        ("dat", "direction-aware", &dat_pool),
        ("datm", "datm", &datm_pool),
        ("mul", "multilingual", &mul_pool_),
        ("gmx", "group-multilingual", &gmx_pool),
        ("sep", "separate", &sep_pool),
    ];

    let t_score = Instant::now();
    let all_tasks = ctx.registry.all_tasks();
    let mut scores = Vec::new();
    for (label, _, pool) in &pools {
        scores.push((label.to_string(), score_map(pool, &all_tasks, &ctx)?));
    }
    let score_s = t_score.elapsed().as_secs_f64();

    let mut deltas = BTreeMap::new();
    let mut records = Vec::new();
    for t in &all_tasks {
        let s = find_scores(&scores, "sep")[t].bleu;
        let m = find_scores(&scores, "mul")[t].bleu;
        deltas.insert(t.clone(), delta_metric(s, m, 0.0)?);
        records.push(DeltaRecord::new(t.clone(), s, m, 0.0)?);
    }
    let asymmetry = asymmetry_report(&records, &ctx.registry)?;

    let mut rows = Vec::new();
    for (label, strategy, _) in &pools {
        let map = find_scores(&scores, label);
        for t in &all_tasks {
            let (d, v) = deltas[t];
            rows.push(report_row(&ctx, label, strategy, t, map[t], d, v)?);
        }
    }

    let dir_tasks = |d: Direction| -> Vec<TranslationTask> {
        all_tasks.iter().filter(|t| t.direction() == d).cloned().collect()
    };
    let into_tasks = dir_tasks(Direction::IntoEnglish);
    let from_tasks = dir_tasks(Direction::FromEnglish);

    let mut mean_bleu = BTreeMap::new();
    for (label, _, _) in &pools {
        let map = find_scores(&scores, label);
        let mut per_dir = BTreeMap::new();
        per_dir.insert(Direction::IntoEnglish, mean(into_tasks.iter().map(|t| map[t].bleu)));
        per_dir.insert(Direction::FromEnglish, mean(from_tasks.iter().map(|t| map[t].bleu)));
        mean_bleu.insert(label.to_string(), per_dir);
    }

    let mut degradation = BTreeMap::new();
    for (d, tasks) in [
        (Direction::IntoEnglish, &into_tasks),
        (Direction::FromEnglish, &from_tasks),
    ] {
        let before = mean_score(find_scores(&scores, "dat"), tasks);
        let after = mean_score(find_scores(&scores, "datm"), tasks);
        degradation.insert(
            d,
            merge_degradation(&before, &after, dat_pool.param_count(), datm_pool.param_count())?,
        );
    }
    let ratio = degradation[&Direction::FromEnglish].bleu / degradation[&Direction::IntoEnglish].bleu;

    let summary = DatVsDatmSummary {
        n_languages: ctx.registry.n_non_english(),
        n_groups: ctx.registry.n_groups(),
        dat_pool_size: pool_size(PoolMode::Dat, ctx.registry.n_non_english(), ctx.registry.n_groups() as usize)?,
        datm_pool_size: pool_size(PoolMode::Datm, ctx.registry.n_non_english(), ctx.registry.n_groups() as usize)?,
        dat_param_count: dat_pool.param_count(),
        datm_param_count: datm_pool.param_count(),
        mean_bleu,
        degradation,
        degradation_ratio_en_xx_over_xx_en: ratio,
        asymmetry,
    };

    let mut rep = Reporter::new(&spec.output_dir)?;
    rep.write_text("report.csv", &rows_to_csv(&rows))?;
    rep.write_json("summary.json", &summary)?;
    rep.runs_json(&ctx, runs)?;
    let pool_refs: Vec<(&str, &AdapterPool)> =
        pools.iter().map(|(l, _, p)| (*l, *p)).collect();
    rep.save_pools(&ctx, &pool_refs)?;
    let manifest = rep.finish(spec, &ctx, train_s, score_s, started)?;
    Ok(DatVsDatmOutput {
        manifest,
        summary,
        rows,
        scores,
    })
}

// ---------------------------------------------------------------------------
// rank sweep

/// Mean test BLEU of a direction-aware pool at one LoRA rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub rank: u32,
    pub direction: Direction,
    pub mean_bleu: f64,
    pub pool_params: usize,
}

pub struct RankSweepOutput {
    pub manifest: ExperimentManifest,
    pub table: Vec<RankRow>,
    pub rows: Vec<ReportRow>,
}

/// Rank sweep: one full direction-aware pool per LoRA rank, scored on every
/// task. Deltas are measured against the first (smallest) rank.
pub fn run_rank_sweep(spec: &ExperimentSpec) -> Result<RankSweepOutput> {
    let started = Instant::now();
    expect_kind(spec, ExperimentKind::RankSweep)?;
    let ctx = prepare(spec)?;
    let jobs = strategy_bundles(Strategy::DirectionAware, &ctx.registry);
    let all_tasks = ctx.registry.all_tasks();

    let t_train = Instant::now();
    let mut runs = Vec::new();
    let mut pools = Vec::new();
    for &rank in &spec.ranks {
        let mut cfg = spec.train.clone();
        cfg.lora_rank = rank;
        let results = train_jobs(&cfg, spec.step_budget, &jobs, &ctx)?;
        runs.extend(
            results
                .iter()
                .map(|(_, s)| RunSummary::labeled(format!("r{rank}:{}", s.id), s)),
        );
        let pool = pool_from(PoolMode::Dat, results.into_iter().map(|(b, _)| b).collect())?;
        pool.check_size(&ctx.registry)?;
        pools.push((rank, pool));
    }
    let train_s = t_train.elapsed().as_secs_f64();

    let t_score = Instant::now();
    let mut per_rank_scores = Vec::new();
    for (rank, pool) in &pools {
        per_rank_scores.push((*rank, score_map(pool, &all_tasks, &ctx)?));
    }
    let score_s = t_score.elapsed().as_secs_f64();

    let reference = &per_rank_scores[0].1;
    let mut table = Vec::new();
    let mut rows = Vec::new();
    for ((rank, pool), (_, scores)) in pools.iter().zip(&per_rank_scores) {
        for d in [Direction::IntoEnglish, Direction::FromEnglish] {
            let tasks: Vec<TranslationTask> =
                all_tasks.iter().filter(|t| t.direction() == d).cloned().collect();
            for t in &tasks {
                let (delta, verdict) = delta_metric(reference[t].bleu, scores[t].bleu, 0.0)?;
                rows.push(report_row(
                    &ctx,
                    &format!("r{rank}:dat"),
                    "direction-aware",
                    t,
                    scores[t],
                    delta,
                    verdict,
                )?);
            }
            table.push(RankRow {
                rank: *rank,
                direction: d,
                mean_bleu: mean(tasks.iter().map(|t| scores[t].bleu)),
                pool_params: pool.param_count(),
            });
        }
    }

    let mut rep = Reporter::new(&spec.output_dir)?;
    rep.write_text("report.csv", &rows_to_csv(&rows))?;
    rep.write_json("ranks.json", &table)?;
    rep.runs_json(&ctx, runs)?;
    let labels: Vec<String> = pools.iter().map(|(r, _)| format!("dat-r{r}")).collect();
    let pool_refs: Vec<(&str, &AdapterPool)> = labels
        .iter()
        .zip(&pools)
        .map(|(l, (_, p))| (l.as_str(), p))
        .collect();
    rep.save_pools(&ctx, &pool_refs)?;
    let manifest = rep.finish(spec, &ctx, train_s, score_s, started)?;
    Ok(RankSweepOutput {
        manifest,
        table,
        rows,
    })
}

/// Dispatch on the spec's kind and run it.
pub fn run(spec: &ExperimentSpec) -> Result<ExperimentManifest> {
    match spec.kind {
        ExperimentKind::LanguageSweep => run_language_sweep(spec).map(|o| o.manifest),
        ExperimentKind::StrategyComparison => run_strategy_comparison(spec).map(|o| o.manifest),
        ExperimentKind::AnchorSet => run_anchor(spec).map(|o| o.manifest),
        ExperimentKind::DatVsDatm => run_dat_vs_datm(spec).map(|o| o.manifest),
        ExperimentKind::RankSweep => run_rank_sweep(spec).map(|o| o.manifest),
    }
}
