//! Fine-tuning strategies over the toy model, base-model pretraining, and
//! the inverse-square-root learning-rate schedule.
//!
//! An epoch is one pass over the shuffled union of the tasks' training
//! pairs; shuffling is driven by a stream seeded from (cfg.seed, the sorted
//! task set), and so is the adapter init. Keying the stream by the task set
//! rather than by the bundle id makes "multilingual training over a single
//! task" coincide bit-for-bit with separate training of that task, which is
//! what lets sweep curves start at a true zero gap.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterBundle, AdapterDirection};
use crate::error::{Error, Result};
use crate::merging::{flatten_bundle, merge_group, unflatten_bundle, MergeConfig};
use crate::registry::{Direction, Registry, TranslationTask};
use crate::routing::{AdapterPool, PoolMode};
use crate::rng::{derive_seed, SplitMix64};
use crate::synth::{Corpus, Split};
use crate::toymodel::{
    adapter_grads, base_grads, AdamState, BaseModel, ModelConfig, Prepared, TokenSequence,
};
use crate::vocab::Vocab;

/// Training corpora keyed by task (train split only).
pub type CorpusMap = BTreeMap<TranslationTask, Corpus>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Multilingual,
    GroupMultilingual,
    Separate,
    DirectionAware,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Multilingual => write!(f, "multilingual"),
            Strategy::GroupMultilingual => write!(f, "group-multilingual"),
            Strategy::Separate => write!(f, "separate"),
            Strategy::DirectionAware => write!(f, "direction-aware"),
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Strategy> {
        match s {
            "multilingual" => Ok(Strategy::Multilingual),
            "group-multilingual" => Ok(Strategy::GroupMultilingual),
            "separate" => Ok(Strategy::Separate),
            "direction-aware" => Ok(Strategy::DirectionAware),
            _ => Err(Error::ModeError(format!("unknown strategy '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr_max")]
    pub lr_max: f64,
    #[serde(default = "default_warmup_ratio")]
    pub warmup_ratio: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lora_rank")]
    pub lora_rank: u32,
    /// Defaults to 2·rank when absent, tracking rank overrides.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_alpha: Option<f32>,
    #[serde(default)]
    pub seed: u64,
}

fn default_lr_max() -> f64 {
    2e-3
}
fn default_warmup_ratio() -> f64 {
    0.01
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_batch_size() -> usize {
    32
}
fn default_epochs() -> usize {
    1
}
fn default_lora_rank() -> u32 {
    16
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are well-formed")
    }
}

impl TrainConfig {
    pub fn alpha(&self) -> f32 {
        self.lora_alpha.unwrap_or(2.0 * self.lora_rank as f32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return Err(Error::BadConfig(format!("lr_max must be positive, got {}", self.lr_max)));
        }
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0) {
            return Err(Error::BadConfig(format!(
                "warmup_ratio must lie in (0, 1), got {}",
                self.warmup_ratio
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::BadConfig(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.lora_rank == 0 {
            return Err(Error::BadConfig(
                "batch_size, epochs and lora_rank must be positive".into(),
            ));
        }
        if !(self.alpha() > 0.0) {
            return Err(Error::BadConfig(format!(
                "lora_alpha must be positive, got {}",
                self.alpha()
            )));
        }
        Ok(())
    }
}

/// Inverse-square-root schedule with linear warmup over
/// w = max(1, ⌈warmup_ratio·total⌉) steps; steps are 1-based.
pub fn lr_at(t: usize, total: usize, cfg: &TrainConfig) -> f64 {
    debug_assert!(t >= 1 && t <= total, "step {t} outside 1..={total}");
    let w = ((cfg.warmup_ratio * total as f64).ceil() as usize).max(1);
    if t <= w {
        cfg.lr_max * t as f64 / w as f64
    } else {
        cfg.lr_max * (w as f64 / t as f64).sqrt()
    }
}

/// Per-run statistics; losses are measured on a fixed probe sample (the
/// first 256 sequences in task order), so initial vs final are comparable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunStats {
    pub id: String,
    pub tasks: Vec<String>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
    pub wall_time_s: f64,
}

/// Sidecar metadata written next to a trained bundle.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingManifest {
    pub strategy: String,
    pub tasks: Vec<String>,
    pub cfg: TrainConfig,
    pub seed: u64,
    pub final_loss: f64,
    pub steps: usize,
    pub wall_time_s: f64,
    pub bundle_path: String,
}

fn task_set_label(tasks: &BTreeSet<TranslationTask>) -> String {
    tasks.iter().map(|t| t.to_string()).collect::<Vec<_>>().join("+")
}

fn encode_tasks(
    vocab: &Vocab,
    tasks: &BTreeSet<TranslationTask>,
    corpora: &CorpusMap,
    max_seq: usize,
) -> Result<Vec<TokenSequence>> {
    let mut out = Vec::new();
    for task in tasks {
        let corpus = corpora
            .get(task)
            .ok_or_else(|| Error::MissingCorpus(task.to_string()))?;
        if corpus.task != *task {
            return Err(Error::Validation(format!(
                "corpus under key {task} describes task {}",
                corpus.task
            )));
        }
        if corpus.split != Split::Train {
            return Err(Error::Validation(format!(
                "refusing to train on the {} split of {task}",
                corpus.split
            )));
        }
        for (src, tgt) in &corpus.pairs {
            let seq = vocab.encode_pair(&task.dst, src, tgt)?;
            if seq.ids.len() > max_seq {
                return Err(Error::SequenceTooLong {
                    len: seq.ids.len(),
                    max_seq,
                });
            }
            out.push(seq);
        }
    }
    Ok(out)
}

const PROBE_SAMPLE: usize = 256;

fn probe_loss(base: &BaseModel, bundle: &AdapterBundle, probe: &[TokenSequence]) -> Result<f64> {
    Prepared::new(base, Some(bundle))?.loss(probe)
}

/// Train one LoRA bundle on the shuffled union of the tasks' training pairs
/// for `cfg.epochs`. Internally single-threaded; distinct calls are
/// independent and may run concurrently.
pub fn train_adapter(
    base: &BaseModel,
    vocab: &Vocab,
    id: &str,
    tasks: &BTreeSet<TranslationTask>,
    corpora: &CorpusMap,
    cfg: &TrainConfig,
) -> Result<(AdapterBundle, RunStats)> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::EmptyInput("no tasks to train on".into()));
    }
    let started = Instant::now();
    let label = task_set_label(tasks);
    let data = encode_tasks(vocab, tasks, corpora, base.cfg.max_seq)?;
    if data.is_empty() {
        return Err(Error::EmptyInput(format!("tasks {label} have no training pairs")));
    }

    let mut directions = tasks.iter().map(|t| t.direction());
    let first = directions.next().expect("nonempty");
    let direction = if directions.all(|d| d == first) {
        match first {
            Direction::IntoEnglish => AdapterDirection::IntoEnglish,
            Direction::FromEnglish => AdapterDirection::FromEnglish,
        }
    } else {
        AdapterDirection::Mixed
    };
    let languages: Vec<String> = tasks.iter().map(|t| t.foreign().to_string()).collect();

    let mut bundle = base.init_bundle(
        id,
        direction,
        languages,
        cfg.lora_rank,
        cfg.alpha(),
        derive_seed(cfg.seed, &format!("init:{label}")),
    );

    let probe = &data[..data.len().min(PROBE_SAMPLE)];
    let initial_loss = probe_loss(base, &bundle, probe)?;

    let n = data.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffler = SplitMix64::new(derive_seed(cfg.seed, &format!("order:{label}")));
    let mut tv = flatten_bundle(&bundle);
    let mut opt = AdamState::new(tv.len(), cfg.weight_decay);

    for t in 1..=total_steps {
        let pos = (t - 1) % steps_per_epoch;
        if pos == 0 {
            shuffler.shuffle(&mut order);
        }
        let lo = pos * cfg.batch_size;
        let hi = (lo + cfg.batch_size).min(n);
        let batch: Vec<TokenSequence> = order[lo..hi].iter().map(|&i| data[i].clone()).collect();
        let (_, grads) = adapter_grads(base, &bundle, &batch)?;
        opt.step(&mut tv.entries, &grads.flatten(), lr_at(t, total_steps, cfg))?;
        bundle = unflatten_bundle(&tv, bundle.meta.clone())?;
    }

    let final_loss = probe_loss(base, &bundle, probe)?;
    let stats = RunStats {
        id: id.to_string(),
        tasks: tasks.iter().map(|t| t.to_string()).collect(),
        initial_loss,
        final_loss,
        steps: total_steps,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok((bundle, stats))
}

/// Pretraining outcome: the trained base plus the per-step loss curve.
pub struct PretrainOutcome {
    pub model: BaseModel,
    pub curve: Vec<f64>,
    pub wall_time_s: f64,
}

/// Full-parameter next-token pretraining on the mixed streams of all
/// corpora (loss over every position, not just targets). A budget of zero
/// steps returns the freshly initialized model unchanged.
pub fn pretrain_base(
    mcfg: &ModelConfig,
    vocab: &Vocab,
    corpora: &CorpusMap,
    cfg: &TrainConfig,
    steps: usize,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if corpora.is_empty() {
        return Err(Error::EmptyInput("no corpora to pretrain on".into()));
    }
    let started = Instant::now();
    let mut model = BaseModel::init(mcfg.clone(), derive_seed(cfg.seed, "pretrain-init"))?;
    if steps == 0 {
        return Ok(PretrainOutcome {
            model,
            curve: Vec::new(),
            wall_time_s: started.elapsed().as_secs_f64(),
        });
    }

    let mut data = Vec::new();
    for (task, corpus) in corpora {
        if corpus.split != Split::Train {
            return Err(Error::Validation(format!(
                "refusing to pretrain on the {} split of {task}",
                corpus.split
            )));
        }
        for (src, tgt) in &corpus.pairs {
            let seq = vocab.encode_pair(&task.dst, src, tgt)?;
            if seq.ids.len() > mcfg.max_seq {
                return Err(Error::SequenceTooLong {
                    len: seq.ids.len(),
                    max_seq: mcfg.max_seq,
                });
            }
            data.push(TokenSequence::lm(seq.ids));
        }
    }

    let n = data.len();
    let steps_per_pass = n.div_ceil(cfg.batch_size);
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffler = SplitMix64::new(derive_seed(cfg.seed, "pretrain-order"));
    let mut flat: Vec<f32> = model
        .param_slices()
        .iter()
        .flat_map(|s| s.iter().copied())
        .collect();
    let mut opt = AdamState::new(flat.len(), cfg.weight_decay);
    let mut curve = Vec::with_capacity(steps);

    for t in 1..=steps {
        let pos = (t - 1) % steps_per_pass;
        if pos == 0 {
            shuffler.shuffle(&mut order);
        }
        let lo = pos * cfg.batch_size;
        let hi = (lo + cfg.batch_size).min(n);
        let batch: Vec<TokenSequence> = order[lo..hi].iter().map(|&i| data[i].clone()).collect();
        let (loss, grads) = base_grads(&model, &batch, true)?;
        curve.push(loss);
        opt.step(&mut flat, &grads, lr_at(t, steps, cfg))?;
        let mut off = 0;
        for s in model.param_slices_mut() {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        }
    }

    Ok(PretrainOutcome {
        model,
        curve,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

/// The (id, task set) pairs a strategy trains over a registry.
pub fn strategy_bundles(
    strategy: Strategy,
    registry: &Registry,
) -> Vec<(String, BTreeSet<TranslationTask>)> {
    match strategy {
        Strategy::Multilingual => {
            let tasks: BTreeSet<_> = registry.all_tasks().into_iter().collect();
            vec![("mul:all".to_string(), tasks)]
        }
        Strategy::GroupMultilingual => (1..=registry.n_groups())
            .map(|g| {
                let tasks: BTreeSet<_> = registry
                    .group_members(g)
                    .iter()
                    .flat_map(|code| registry.tasks_of(code).expect("member is registered"))
                    .collect();
                (format!("gmx:{g}"), tasks)
            })
            .collect(),
        Strategy::Separate => registry
            .all_tasks()
            .into_iter()
            .map(|task| {
                let id = format!("sep:{task}");
                (id, BTreeSet::from([task]))
            })
            .collect(),
        Strategy::DirectionAware => {
            let mut out: Vec<(String, BTreeSet<TranslationTask>)> = registry
                .non_english()
                .map(|lang| {
                    let task = registry.task(&lang.code, "en").expect("registered");
                    (format!("sep:{}-en", lang.code), BTreeSet::from([task]))
                })
                .collect();
            for g in 1..=registry.n_groups() {
                let tasks: BTreeSet<_> = registry
                    .group_members(g)
                    .iter()
                    .map(|code| registry.task("en", code).expect("registered"))
                    .collect();
                out.push((format!("grp:{g}:en-xx"), tasks));
            }
            out
        }
    }
}

/// Train every bundle of a strategy and assemble the pool. Bundles train
/// concurrently when `parallel` is set; each run is internally
/// single-threaded and seeded by its task set, so the result is identical
/// either way.
pub fn train_strategy(
    strategy: Strategy,
    base: &BaseModel,
    vocab: &Vocab,
    registry: &Registry,
    corpora: &CorpusMap,
    cfg: &TrainConfig,
    parallel: bool,
) -> Result<(AdapterPool, Vec<RunStats>)> {
    let specs = strategy_bundles(strategy, registry);
    let train_one = |(id, tasks): &(String, BTreeSet<TranslationTask>)| {
        train_adapter(base, vocab, id, tasks, corpora, cfg)
    };
    let results: Vec<(AdapterBundle, RunStats)> = if parallel {
        specs.par_iter().map(train_one).collect::<Result<_>>()?
    } else {
        specs.iter().map(train_one).collect::<Result<_>>()?
    };
    let mut entries = BTreeMap::new();
    let mut stats = Vec::with_capacity(results.len());
    for (bundle, s) in results {
        entries.insert(bundle.meta.id.clone(), bundle);
        stats.push(s);
    }
    stats.sort_by(|a, b| a.id.cmp(&b.id));
    let mode = match strategy {
        Strategy::DirectionAware => PoolMode::Dat,
        other => PoolMode::Baseline(other),
    };
    Ok((AdapterPool::new(mode, entries)?, stats))
}

/// Direction-aware training: one separate XX→En bundle per language plus
/// one group-multilingual En→XX bundle per group.
pub fn train_direction_aware(
    base: &BaseModel,
    vocab: &Vocab,
    registry: &Registry,
    corpora: &CorpusMap,
    cfg: &TrainConfig,
    parallel: bool,
) -> Result<(AdapterPool, Vec<RunStats>)> {
    train_strategy(Strategy::DirectionAware, base, vocab, registry, corpora, cfg, parallel)
}

/// Compress a DAT pool by merging each group's IntoEnglish bundles into
/// "mrg:<g>:xx-en"; En→XX group bundles are carried over unchanged.
pub fn compress_pool_datm(
    pool: &AdapterPool,
    registry: &Registry,
    cfg: &MergeConfig,
) -> Result<AdapterPool> {
    if pool.mode != PoolMode::Dat {
        return Err(Error::ModeError(format!(
            "datm compression needs a dat pool, got {}",
            pool.mode
        )));
    }
    let mut entries = BTreeMap::new();
    for g in 1..=registry.n_groups() {
        let members = registry.group_members(g);
        let mut bundles = Vec::with_capacity(members.len());
        for code in &members {
            bundles.push(pool.get(&format!("sep:{code}-en"))?);
        }
        let merged = merge_group(&bundles, cfg, g)?;
        entries.insert(merged.meta.id.clone(), merged);
        let gid = format!("grp:{g}:en-xx");
        entries.insert(gid.clone(), pool.get(&gid)?.clone());
    }
    AdapterPool::new(PoolMode::Datm, entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::Registry;
    use crate::synth::{build_languages, gen_corpus, CorpusSizes, SynthSpec};

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn lr_schedule_matches_pinned_points() {
        let cfg = TrainConfig::default();
        // total 400 → w = 4.
        approx(lr_at(4, 400, &cfg), cfg.lr_max, 1e-15);
        approx(lr_at(16, 400, &cfg), cfg.lr_max / 2.0, 1e-15);
        // total 10_000 → w = 100; first step is lr_max/100.
        approx(lr_at(1, 10_000, &cfg), cfg.lr_max / 100.0, 1e-15);
        // Continuity at the warmup boundary and decay beyond it.
        approx(lr_at(100, 10_000, &cfg), cfg.lr_max, 1e-15);
        assert!(lr_at(101, 10_000, &cfg) < cfg.lr_max);
        assert!(lr_at(400, 10_000, &cfg) > lr_at(401, 10_000, &cfg));
        // Tiny runs still warm up over at least one step.
        approx(lr_at(1, 3, &cfg), cfg.lr_max, 1e-15);
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_max, 2e-3);
        assert_eq!(cfg.warmup_ratio, 0.01);
        assert_eq!(cfg.weight_decay, 0.01);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.epochs, 1);
        assert_eq!(cfg.lora_rank, 16);
        assert_eq!(cfg.alpha(), 32.0);
        cfg.validate().unwrap();

        let mut rank8 = cfg.clone();
        rank8.lora_rank = 8;
        assert_eq!(rank8.alpha(), 16.0, "alpha default tracks the rank");
        rank8.lora_alpha = Some(5.0);
        assert_eq!(rank8.alpha(), 5.0);

        let mut bad = cfg.clone();
        bad.warmup_ratio = 1.0;
        assert!(bad.validate().is_err());
        let mut bad = cfg.clone();
        bad.batch_size = 0;
        assert!(bad.validate().is_err());
        let mut bad = cfg;
        bad.lr_max = -1.0;
        assert!(bad.validate().is_err());
    }

    fn tiny_spec() -> SynthSpec {
        SynthSpec {
            n_groups: 2,
            langs_per_group: 3,
            content_vocab: 16,
            sent_len_range: [3, 6],
            corpus_sizes: CorpusSizes {
                high: 24,
                mid: 16,
                low: 8,
            },
            test_size: 4,
            seed: 5,
            ..SynthSpec::default()
        }
    }

    struct Desk {
        registry: Registry,
        vocab: Vocab,
        base: BaseModel,
        corpora: CorpusMap,
    }

    fn desk() -> Desk {
        let spec = tiny_spec();
        let (registry, langs) = build_languages(&spec).unwrap();
        let vocab = Vocab::new(spec.content_vocab, &registry);
        let mcfg = ModelConfig {
            d_model: 32,
            max_seq: 16,
            ..ModelConfig::for_vocab(vocab.size())
        };
        let base = BaseModel::init(mcfg, 1).unwrap();
        let mut corpora = CorpusMap::new();
        for task in registry.all_tasks() {
            let lang = &langs[task.foreign()];
            let corpus = gen_corpus(&spec, lang, task.direction(), Split::Train).unwrap();
            corpora.insert(task, corpus);
        }
        Desk {
            registry,
            vocab,
            base,
            corpora,
        }
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            epochs: 1,
            lora_rank: 4,
            seed: 9,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn separate_bundle_metadata_and_loss_decrease() {
        let d = desk();
        let cfg = TrainConfig {
            epochs: 4,
            lr_max: 1e-2,
            ..quick_cfg()
        };
        let task = d.registry.task("g1l0", "en").unwrap();
        let tasks = BTreeSet::from([task]);
        let (bundle, stats) =
            train_adapter(&d.base, &d.vocab, "sep:g1l0-en", &tasks, &d.corpora, &cfg).unwrap();
        assert_eq!(bundle.meta.direction, AdapterDirection::IntoEnglish);
        assert_eq!(bundle.meta.languages, vec!["g1l0".to_string()]);
        assert_eq!(stats.steps, 4 * 3); // 24 pairs / batch 8, 4 epochs
        assert!(
            stats.final_loss < stats.initial_loss,
            "loss should drop: {} -> {}",
            stats.initial_loss,
            stats.final_loss
        );
    }

    #[test]
    fn group_bundle_covers_all_member_languages() {
        let d = desk();
        let tasks: BTreeSet<_> = d
            .registry
            .group_members(1)
            .iter()
            .map(|code| d.registry.task("en", code).unwrap())
            .collect();
        let (bundle, _) =
            train_adapter(&d.base, &d.vocab, "grp:1:en-xx", &tasks, &d.corpora, &quick_cfg())
                .unwrap();
        assert_eq!(bundle.meta.direction, AdapterDirection::FromEnglish);
        assert_eq!(bundle.meta.languages.len(), 3);

        // Mixing directions marks the bundle as mixed.
        let mixed: BTreeSet<_> = d
            .registry
            .tasks_of("g1l0")
            .unwrap()
            .into_iter()
            .collect();
        let (bundle, _) =
            train_adapter(&d.base, &d.vocab, "mix", &mixed, &d.corpora, &quick_cfg()).unwrap();
        assert_eq!(bundle.meta.direction, AdapterDirection::Mixed);
    }

    #[test]
    fn missing_corpus_is_reported() {
        let d = desk();
        let task = d.registry.task("g2l1", "en").unwrap();
        let mut corpora = d.corpora.clone();
        corpora.remove(&task);
        let err = train_adapter(
            &d.base,
            &d.vocab,
            "sep:g2l1-en",
            &BTreeSet::from([task]),
            &corpora,
            &quick_cfg(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::MissingCorpus(_)));
    }

    #[test]
    fn training_is_deterministic_and_seeded_by_task_set() {
        let d = desk();
        let cfg = quick_cfg();
        let task = d.registry.task("g1l1", "en").unwrap();
        let tasks = BTreeSet::from([task]);
        let (a, _) =
            train_adapter(&d.base, &d.vocab, "sep:g1l1-en", &tasks, &d.corpora, &cfg).unwrap();
        let (b, _) =
            train_adapter(&d.base, &d.vocab, "sep:g1l1-en", &tasks, &d.corpora, &cfg).unwrap();
        assert_eq!(
            flatten_bundle(&a).entries.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            flatten_bundle(&b).entries.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );

        // A "multilingual" bundle over the same single task trains to the
        // same weights bit for bit, whatever its id.
        let (c, _) = train_adapter(&d.base, &d.vocab, "mul:probe", &tasks, &d.corpora, &cfg).unwrap();
        assert_eq!(
            flatten_bundle(&a).entries.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            flatten_bundle(&c).entries.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        // Different seed, different weights.
        let mut reseeded = cfg;
        reseeded.seed += 1;
        let (e, _) =
            train_adapter(&d.base, &d.vocab, "sep:g1l1-en", &tasks, &d.corpora, &reseeded).unwrap();
        assert_ne!(
            flatten_bundle(&a).entries.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            flatten_bundle(&e).entries.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn pretraining_budget_zero_returns_init_unchanged() {
        let d = desk();
        let cfg = quick_cfg();
        let out = pretrain_base(&d.base.cfg, &d.vocab, &d.corpora, &cfg, 0).unwrap();
        let fresh = BaseModel::init(d.base.cfg.clone(), derive_seed(cfg.seed, "pretrain-init")).unwrap();
        assert_eq!(out.model.fingerprint(), fresh.fingerprint());
        assert!(out.curve.is_empty());
    }

    #[test]
    fn pretraining_reduces_loss_and_is_deterministic() {
        let d = desk();
        let cfg = quick_cfg();
        let steps = 40;
        let out = pretrain_base(&d.base.cfg, &d.vocab, &d.corpora, &cfg, steps).unwrap();
        assert_eq!(out.curve.len(), steps);
        let head: f64 = out.curve[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = out.curve[steps - 5..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "pretraining loss should fall: {head} -> {tail}");

        let again = pretrain_base(&d.base.cfg, &d.vocab, &d.corpora, &cfg, steps).unwrap();
        assert_eq!(out.model.fingerprint(), again.model.fingerprint());
    }

    #[test]
    fn direction_aware_pool_shape() {
        let d = desk();
        let (pool, stats) =
            train_direction_aware(&d.base, &d.vocab, &d.registry, &d.corpora, &quick_cfg(), true)
                .unwrap();
        assert_eq!(pool.mode, PoolMode::Dat);
        assert_eq!(pool.size(), 6 + 2);
        pool.check_size(&d.registry).unwrap();
        assert!(pool.get("sep:g1l0-en").is_ok());
        assert!(pool.get("grp:2:en-xx").is_ok());
        assert_eq!(stats.len(), 8);
        // Every IntoEnglish entry covers exactly one language.
        for (id, bundle) in pool.entries() {
            if id.starts_with("sep:") {
                assert_eq!(bundle.meta.languages.len(), 1);
            }
        }

        // Parallel and sequential training agree bitwise.
        let (serial, _) =
            train_direction_aware(&d.base, &d.vocab, &d.registry, &d.corpora, &quick_cfg(), false)
                .unwrap();
        assert_eq!(serial, pool);
    }

    #[test]
    fn datm_compression_halves_the_pool_and_carries_en_xx() {
        let d = desk();
        let (dat, _) =
            train_direction_aware(&d.base, &d.vocab, &d.registry, &d.corpora, &quick_cfg(), true)
                .unwrap();
        let datm = compress_pool_datm(&dat, &d.registry, &MergeConfig::default()).unwrap();
        assert_eq!(datm.mode, PoolMode::Datm);
        assert_eq!(datm.size(), 2 * 2);
        datm.check_size(&d.registry).unwrap();
        assert!(datm.get("mrg:1:xx-en").is_ok());
        // FromEnglish bundles ride along bit-identically.
        for g in 1..=2u8 {
            let gid = format!("grp:{g}:en-xx");
            assert_eq!(datm.get(&gid).unwrap(), dat.get(&gid).unwrap());
        }
        // Only DAT pools compress.
        assert!(matches!(
            compress_pool_datm(&datm, &d.registry, &MergeConfig::default()),
            Err(Error::ModeError(_))
        ));
    }

    #[test]
    fn baseline_strategies_build_expected_pools() {
        let d = desk();
        let cfg = quick_cfg();
        let (mul, _) = train_strategy(
            Strategy::Multilingual,
            &d.base,
            &d.vocab,
            &d.registry,
            &d.corpora,
            &cfg,
            true,
        )
        .unwrap();
        assert_eq!(mul.size(), 1);
        assert!(mul.get("mul:all").is_ok());
        assert_eq!(
            mul.get("mul:all").unwrap().meta.direction,
            AdapterDirection::Mixed
        );

        let (gmx, _) = train_strategy(
            Strategy::GroupMultilingual,
            &d.base,
            &d.vocab,
            &d.registry,
            &d.corpora,
            &cfg,
            true,
        )
        .unwrap();
        assert_eq!(gmx.size(), 2);
        assert!(gmx.get("gmx:1").is_ok());

        let (sep, _) = train_strategy(
            Strategy::Separate,
            &d.base,
            &d.vocab,
            &d.registry,
            &d.corpora,
            &cfg,
            true,
        )
        .unwrap();
        assert_eq!(sep.size(), 12);
        assert!(sep.get("sep:en-g2l2").is_ok());
        assert!(sep.get("sep:g2l2-en").is_ok());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in [
            Strategy::Multilingual,
            Strategy::GroupMultilingual,
            Strategy::Separate,
            Strategy::DirectionAware,
        ] {
            let parsed: Strategy = s.to_string().parse().unwrap();
            assert_eq!(parsed, s);
        }
        assert!("mystery".parse::<Strategy>().is_err());
    }
}
