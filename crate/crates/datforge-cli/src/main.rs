//! Command-line front end for the datforge library.
//!
//! Conventions shared by every subcommand:
//! - machine-readable results go to stdout (one JSON line, or the pinned
//!   text format of `registry`, `route` and `translate`); progress and
//!   diagnostics go to stderr, gated by `DATFORGE_LOG`
//!   (error | warn | info | debug, default warn);
//! - exit code 0 on success, 1 on a configuration or validation problem
//!   (including bad command lines), 2 on a runtime failure such as I/O;
//! - `--config` points at an experiment-spec JSON file; omitted fields take
//!   built-in defaults, and flags override the file (`--seed` replaces the
//!   synth, train and merge seeds at once; `--out` sets the output
//!   directory; the `experiment` subcommand sets the spec kind);
//! - commands only ever write under `--out`; inputs are never mutated.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use datforge::error::ErrorClass;
use datforge::evaluation::Score;
use datforge::experiments::{
    self, prepare, prepare_with_base, score_map, train_pool, ExperimentKind, ExperimentSpec,
    PretrainSummary, RunSummary, RunsFile,
};
use datforge::registry::{Direction, Registry, Resource, TranslationTask};
use datforge::routing::{load_pool, route_id, save_pool, PoolMode};
use datforge::synth::{build_languages, corpus_file_name, gen_corpus, save_corpus, Split};
use datforge::toymodel::BaseModel;
use datforge::training::{compress_pool_datm, strategy_bundles, Strategy};
use datforge::vocab::Vocab;
use datforge::{Error, Result};

#[derive(Parser)]
#[command(
    name = "datforge",
    version,
    about = "Direction-aware adapter pools for multilingual translation, at desk scale",
    propagate_version = true
)]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Inspect and validate language registries.
    Registry {
        #[command(subcommand)]
        cmd: RegistryCmd,
    },
    /// Build synthetic languages and corpora.
    Synth {
        #[command(subcommand)]
        cmd: SynthCmd,
    },
    /// Pretrain the shared base model on all training corpora.
    Pretrain(JobArgs),
    /// Train an adapter pool under one strategy.
    Train(TrainArgs),
    /// Merge a dat pool's into-English adapters group-wise (datm).
    Merge(MergeArgs),
    /// Print the adapter id the routing law picks for a task.
    Route(RouteArgs),
    /// Translate one token sequence with a saved pool.
    Translate(TranslateArgs),
    /// Score a saved pool on every test set.
    Eval(EvalArgs),
    /// Run a full experiment and write its report files.
    Experiment {
        #[command(subcommand)]
        cmd: ExperimentCmd,
    },
}

#[derive(Subcommand)]
enum RegistryCmd {
    /// Check a registry file and print its group sizes.
    Validate(RegistryFileArg),
    /// Print every language as a CSV table.
    Show(RegistryFileArg),
}

#[derive(Subcommand)]
enum SynthCmd {
    /// Generate the registry and all corpora into --out.
    Build(JobArgs),
}

#[derive(Subcommand)]
enum ExperimentCmd {
    /// Language-count sweep: multilingual vs separate at growing k.
    Sweep(JobArgs),
    /// Strategy comparison: multilingual vs group-wise vs separate.
    Compare(JobArgs),
    /// Anchor-set interference: fixed languages inside growing supersets.
    Anchor(JobArgs),
    /// Direction-aware training vs its group-merged compression.
    DatVsDatm(JobArgs),
    /// LoRA rank sweep over direction-aware pools.
    RankSweep(JobArgs),
}

#[derive(Args)]
struct RegistryFileArg {
    /// Registry JSON file, or "builtin" for the bundled one.
    #[arg(long, default_value = "builtin")]
    file: String,
}

#[derive(Args)]
struct JobArgs {
    /// Experiment-spec JSON file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Master seed: overrides the synth, train and merge seeds together.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Which adapters to train and on what data.
    #[arg(long, value_enum)]
    strategy: StrategyArg,
    #[command(flatten)]
    job: JobArgs,
}

#[derive(Args)]
struct MergeArgs {
    /// Directory holding a dat pool (as written by `train --strategy dat`).
    #[arg(long)]
    pool: PathBuf,
    #[command(flatten)]
    job: JobArgs,
}

#[derive(Args)]
struct RouteArgs {
    /// Pool flavour the request would be served from.
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Translation task, e.g. "de-en" or "en-zh".
    #[arg(long)]
    task: String,
    /// Registry JSON file, or "builtin" for the bundled one.
    #[arg(long, default_value = "builtin")]
    file: String,
}

#[derive(Args)]
struct TranslateArgs {
    /// Directory holding a saved pool.
    #[arg(long)]
    pool: PathBuf,
    /// Translation task, e.g. "g1l1-en".
    #[arg(long)]
    task: String,
    /// Source sentence as space-separated content-token ids.
    #[arg(long)]
    text: String,
    /// Spec the pool was built from (for the registry and vocabulary).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base checkpoint; defaults to the pool manifest's reference.
    #[arg(long)]
    base: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory holding a saved pool.
    #[arg(long)]
    pool: PathBuf,
    /// Base checkpoint; defaults to the pool manifest's reference.
    #[arg(long)]
    base: Option<PathBuf>,
    #[command(flatten)]
    job: JobArgs,
}

/// CLI spelling of the two routable pool modes.
#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Dat,
    Datm,
}

impl From<ModeArg> for PoolMode {
    fn from(m: ModeArg) -> PoolMode {
        match m {
            ModeArg::Dat => PoolMode::Dat,
            ModeArg::Datm => PoolMode::Datm,
        }
    }
}

/// CLI spelling of the training strategies.
#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    Multilingual,
    Group,
    Separate,
    Dat,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Strategy {
        match s {
            StrategyArg::Multilingual => Strategy::Multilingual,
            StrategyArg::Group => Strategy::GroupMultilingual,
            StrategyArg::Separate => Strategy::Separate,
            StrategyArg::Dat => Strategy::DirectionAware,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("DATFORGE_LOG", "warn"),
    )
    .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // --help and --version are successes; everything else is a
            // command-line problem and exits 1.
            let code = match err.kind() {
                clap::error::ErrorKind::DisplayHelp
                | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(err) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            eprintln!("error: {err}");
            return ExitCode::from(2);
        }
    }
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(match err.class() {
                ErrorClass::Config => 1,
                ErrorClass::Runtime => 2,
            })
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Registry { cmd: RegistryCmd::Validate(args) } => registry_validate(&args),
        Cmd::Registry { cmd: RegistryCmd::Show(args) } => registry_show(&args),
        Cmd::Synth { cmd: SynthCmd::Build(args) } => synth_build(&args),
        Cmd::Pretrain(args) => pretrain_cmd(&args),
        Cmd::Train(args) => train_cmd(&args),
        Cmd::Merge(args) => merge_cmd(&args),
        Cmd::Route(args) => route_cmd(&args),
        Cmd::Translate(args) => translate_cmd(&args),
        Cmd::Eval(args) => eval_cmd(&args),
        Cmd::Experiment { cmd } => {
            let (kind, args) = match cmd {
                ExperimentCmd::Sweep(a) => (ExperimentKind::LanguageSweep, a),
                ExperimentCmd::Compare(a) => (ExperimentKind::StrategyComparison, a),
                ExperimentCmd::Anchor(a) => (ExperimentKind::AnchorSet, a),
                ExperimentCmd::DatVsDatm(a) => (ExperimentKind::DatVsDatm, a),
                ExperimentCmd::RankSweep(a) => (ExperimentKind::RankSweep, a),
            };
            experiment_cmd(kind, &args)
        }
    }
}

// ---------------------------------------------------------------------------
// shared plumbing

/// Load the spec (or defaults), then apply flag overrides: the subcommand's
/// kind, `--out`, and `--seed` across synth, train and merge.
fn load_spec(kind: ExperimentKind, job: &JobArgs) -> Result<ExperimentSpec> {
    let mut spec = match &job.config {
        Some(path) => ExperimentSpec::load(path)?,
        None => ExperimentSpec::new(kind, job.out.clone()),
    };
    spec.kind = kind;
    spec.output_dir = job.out.clone();
    if let Some(seed) = job.seed {
        spec.synth.seed = seed;
        spec.train.seed = seed;
        spec.merge.seed = seed;
    }
    Ok(spec)
}

fn load_registry(file: &str) -> Result<Registry> {
    if file == "builtin" {
        Ok(Registry::builtin())
    } else {
        Registry::load(file)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Print one stdout line, treating a closed pipe as success so
/// `datforge ... | head` exits cleanly instead of panicking.
fn print_line(line: &str) -> Result<()> {
    let mut out = io::stdout().lock();
    match writeln!(out, "{line}").and_then(|()| out.flush()) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
        Err(e) => Err(Error::io("stdout", e)),
    }
}

/// One JSON line on stdout: the machine-readable result of the command.
fn emit<T: Serialize>(value: &T) -> Result<()> {
    let line = serde_json::to_string(value)
        .map_err(|e| Error::Format(format!("stdout json: {e}")))?;
    print_line(&line)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn pretrain_summary(spec: &ExperimentSpec, curve: &[f64]) -> PretrainSummary {
    PretrainSummary {
        steps: spec.pretrain_steps,
        initial_loss: curve.first().copied(),
        final_loss: curve.last().copied(),
    }
}

/// Where a pool's base checkpoint lives: `--base` wins, otherwise the
/// manifest's reference resolved against the pool directory.
fn base_path(pool_dir: &Path, reference: &str, flag: &Option<PathBuf>) -> PathBuf {
    match flag {
        Some(p) => p.clone(),
        None => pool_dir.join(reference),
    }
}

// ---------------------------------------------------------------------------
// commands

fn registry_validate(args: &RegistryFileArg) -> Result<()> {
    let registry = load_registry(&args.file)?;
    let sizes: Vec<String> = registry.group_sizes().iter().map(|s| s.to_string()).collect();
    log::info!(
        "{}: {} languages in {} groups",
        args.file,
        registry.n_non_english(),
        registry.n_groups()
    );
    print_line(&format!("[{}]", sizes.join(",")))
}

fn registry_show(args: &RegistryFileArg) -> Result<()> {
    let registry = load_registry(&args.file)?;
    print_line("code,script,family,subgroup,resource,group")?;
    for lang in registry.languages() {
        print_line(&format!(
            "{},{},{},{},{},{}",
            lang.code,
            lang.script,
            lang.family,
            lang.subgroup,
            lang.resource,
            lang.group.map(|g| g.to_string()).unwrap_or_default()
        ))?;
    }
    Ok(())
}

fn synth_build(args: &JobArgs) -> Result<()> {
    let spec = load_spec(ExperimentKind::DatVsDatm, args)?;
    spec.validate()?;
    let (registry, languages) = build_languages(&spec.synth)?;
    let corpora_dir = spec.output_dir.join("corpora");
    ensure_dir(&corpora_dir)?;
    registry.save(spec.output_dir.join("registry.json"))?;
    let mut written = 0usize;
    for lang in languages.values() {
        for direction in [Direction::IntoEnglish, Direction::FromEnglish] {
            for split in [Split::Train, Split::Test] {
                let corpus = gen_corpus(&spec.synth, lang, direction, split)?;
                let path = corpora_dir.join(corpus_file_name(&corpus.task, split));
                save_corpus(&corpus, &spec.synth, &path)?;
                written += 1;
            }
        }
    }
    log::info!("wrote {written} corpora into {}", corpora_dir.display());
    emit(&json!({
        "languages": registry.n_non_english(),
        "groups": registry.n_groups(),
        "corpora": written,
    }))
}

fn pretrain_cmd(args: &JobArgs) -> Result<()> {
    let spec = load_spec(ExperimentKind::DatVsDatm, args)?;
    let ctx = prepare(&spec)?;
    ensure_dir(&spec.output_dir)?;
    ctx.base.save(spec.output_dir.join("base.model"))?;
    let summary = pretrain_summary(&spec, &ctx.pretrain_curve);
    write_json(&spec.output_dir.join("pretrain.json"), &summary)?;
    log::info!(
        "pretrained {} steps in {:.1}s",
        spec.pretrain_steps,
        ctx.pretrain_wall_s
    );
    emit(&summary)
}

fn train_cmd(args: &TrainArgs) -> Result<()> {
    let spec = load_spec(ExperimentKind::DatVsDatm, &args.job)?;
    let strategy = Strategy::from(args.strategy);
    let ctx = prepare(&spec)?;
    let jobs = strategy_bundles(strategy, &ctx.registry);
    let mode = match strategy {
        Strategy::DirectionAware => PoolMode::Dat,
        other => PoolMode::Baseline(other),
    };
    log::info!("training {} bundles under {strategy}", jobs.len());
    let (pool, stats) = train_pool(mode, &jobs, &ctx, &spec)?;
    ensure_dir(&spec.output_dir)?;
    ctx.base.save(spec.output_dir.join("base.model"))?;
    save_pool(&pool, &ctx.registry, "../base.model", &spec.output_dir.join("pool"))?;
    let runs = RunsFile {
        pretrain: pretrain_summary(&spec, &ctx.pretrain_curve),
        runs: stats.iter().map(RunSummary::from_stats).collect(),
    };
    write_json(&spec.output_dir.join("runs.json"), &runs)?;
    emit(&json!({
        "mode": pool.mode.to_string(),
        "bundles": pool.size(),
        "params": pool.param_count(),
    }))
}

fn merge_cmd(args: &MergeArgs) -> Result<()> {
    let spec = load_spec(ExperimentKind::DatVsDatm, &args.job)?;
    spec.validate()?;
    let (pool, manifest) = load_pool(&args.pool)?;
    let (registry, _) = build_languages(&spec.synth)?;
    let merged = compress_pool_datm(&pool, &registry, &spec.merge)?;
    ensure_dir(&spec.output_dir)?;
    // Keep pointing at the original checkpoint; merging owns no base copy.
    let base_ref = args.pool.join(&manifest.base_checkpoint);
    save_pool(
        &merged,
        &registry,
        &base_ref.to_string_lossy(),
        &spec.output_dir.join("pool"),
    )?;
    emit(&json!({
        "bundles_before": pool.size(),
        "bundles_after": merged.size(),
        "params_before": pool.param_count(),
        "params_after": merged.param_count(),
    }))
}

fn route_cmd(args: &RouteArgs) -> Result<()> {
    let registry = load_registry(&args.file)?;
    let task = TranslationTask::parse(&args.task)?;
    let id = route_id(PoolMode::from(args.mode), &task, &registry)?;
    print_line(&id)
}

fn translate_cmd(args: &TranslateArgs) -> Result<()> {
    let spec = match &args.config {
        Some(path) => ExperimentSpec::load(path)?,
        None => ExperimentSpec::new(ExperimentKind::DatVsDatm, PathBuf::from(".")),
    };
    spec.synth.validate()?;
    let (registry, _) = build_languages(&spec.synth)?;
    let vocab = Vocab::new(spec.synth.content_vocab, &registry);
    let (pool, manifest) = load_pool(&args.pool)?;
    let base = BaseModel::load(base_path(&args.pool, &manifest.base_checkpoint, &args.base))?;
    if base.cfg.vocab_size != vocab.size() {
        return Err(Error::Validation(format!(
            "base model has vocab size {}, this spec needs {}",
            base.cfg.vocab_size,
            vocab.size()
        )));
    }
    let task = TranslationTask::parse(&args.task)?;
    let mut tokens = Vec::new();
    for piece in args.text.split_whitespace() {
        let id: u32 = piece
            .parse()
            .map_err(|_| Error::Parse(format!("bad token id '{piece}'")))?;
        if id as usize >= vocab.content_size() {
            return Err(Error::Validation(format!(
                "token id {id} is outside the content vocabulary (0..{})",
                vocab.content_size()
            )));
        }
        tokens.push(id);
    }
    if tokens.is_empty() {
        return Err(Error::EmptyInput("no source tokens given".into()));
    }
    let decoded = datforge::routing::translate(&pool, &base, &vocab, &task, &tokens, &registry)?;
    let text: Vec<String> = decoded.iter().map(|t| t.to_string()).collect();
    print_line(&text.join(" "))
}

/// One scored test set in `eval.json`.
#[derive(Serialize)]
struct EvalRow {
    task: String,
    direction: Direction,
    group: u8,
    resource: Resource,
    token_accuracy: f64,
    exact_match: f64,
    bleu: f64,
}

fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let spec = load_spec(ExperimentKind::DatVsDatm, &args.job)?;
    let (pool, manifest) = load_pool(&args.pool)?;
    let base = BaseModel::load(base_path(&args.pool, &manifest.base_checkpoint, &args.base))?;
    let ctx = prepare_with_base(&spec, base)?;
    let tasks = ctx.registry.all_tasks();
    log::info!("scoring {} bundles on {} tasks", pool.size(), tasks.len());
    let scores = score_map(&pool, &tasks, &ctx)?;
    let mut rows = Vec::with_capacity(tasks.len());
    let mut means: std::collections::BTreeMap<Direction, (Score, usize)> = Default::default();
    for (task, score) in &scores {
        let foreign = task.foreign();
        rows.push(EvalRow {
            task: task.to_string(),
            direction: task.direction(),
            group: ctx.registry.group_of(foreign)?,
            resource: ctx.registry.get(foreign)?.resource,
            token_accuracy: score.token_accuracy,
            exact_match: score.exact_match,
            bleu: score.bleu,
        });
        let slot = means.entry(task.direction()).or_insert((
            Score {
                token_accuracy: 0.0,
                exact_match: 0.0,
                bleu: 0.0,
            },
            0,
        ));
        slot.0.token_accuracy += score.token_accuracy;
        slot.0.exact_match += score.exact_match;
        slot.0.bleu += score.bleu;
        slot.1 += 1;
    }
    ensure_dir(&spec.output_dir)?;
    write_json(&spec.output_dir.join("eval.json"), &rows)?;
    let mean_json: serde_json::Map<String, serde_json::Value> = means
        .into_iter()
        .map(|(dir, (sum, n))| {
            let n = n as f64;
            (
                dir.to_string(),
                json!({
                    "token_accuracy": sum.token_accuracy / n,
                    "exact_match": sum.exact_match / n,
                    "bleu": sum.bleu / n,
                }),
            )
        })
        .collect();
    emit(&json!({ "tasks": rows.len(), "mean": mean_json }))
}

fn experiment_cmd(kind: ExperimentKind, args: &JobArgs) -> Result<()> {
    let spec = load_spec(kind, args)?;
    log::info!("running {kind} into {}", spec.output_dir.display());
    let manifest = experiments::run(&spec)?;
    emit(&manifest)
}
