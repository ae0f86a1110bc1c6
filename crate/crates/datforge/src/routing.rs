//! Direction-aware adapter selection and the adapter pool container.
//!
//! Routing is deterministic metadata dispatch, not a learned gate: a request
//! into English goes to that language's separate adapter under DAT, or to
//! its group's merged adapter under DATM; a request out of English always
//! goes to the destination group's En→XX adapter. Baseline pools (the
//! bundles of one training strategy) are containers for evaluation and are
//! not routable. Pools are immutable once built; adapters are applied
//! lazily at use and never merged into the base.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{load_bundle, save_bundle, AdapterBundle, AdapterDirection};
use crate::error::{Error, Result};
use crate::registry::{Direction, Registry, TranslationTask};
use crate::toymodel::{BaseModel, Prepared};
use crate::training::Strategy;
use crate::vocab::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Dat,
    Datm,
    Baseline(Strategy),
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PoolMode::Dat => write!(f, "dat"),
            PoolMode::Datm => write!(f, "datm"),
            PoolMode::Baseline(s) => write!(f, "baseline:{s}"),
        }
    }
}

impl std::str::FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<PoolMode> {
        match s {
            "dat" => Ok(PoolMode::Dat),
            "datm" => Ok(PoolMode::Datm),
            _ => {
                if let Some(rest) = s.strip_prefix("baseline:") {
                    Ok(PoolMode::Baseline(rest.parse()?))
                } else {
                    Err(Error::ModeError(format!("unknown pool mode '{s}'")))
                }
            }
        }
    }
}

/// An immutable set of adapter bundles sharing one base model.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPool {
    pub mode: PoolMode,
    entries: BTreeMap<String, AdapterBundle>,
}

impl AdapterPool {
    pub fn new(mode: PoolMode, entries: BTreeMap<String, AdapterBundle>) -> Result<AdapterPool> {
        if entries.is_empty() {
            return Err(Error::EmptyInput("adapter pool has no entries".into()));
        }
        let mut fingerprint = None;
        for (id, bundle) in &entries {
            if *id != bundle.meta.id {
                return Err(Error::Validation(format!(
                    "pool key '{id}' does not match bundle id '{}'",
                    bundle.meta.id
                )));
            }
            bundle.validate()?;
            match fingerprint {
                None => fingerprint = Some(bundle.meta.base_fingerprint),
                Some(fp) if fp != bundle.meta.base_fingerprint => {
                    return Err(Error::IncompatibleBundles(format!(
                        "bundle '{id}' was trained against a different base model"
                    )));
                }
                _ => {}
            }
        }
        Ok(AdapterPool { mode, entries })
    }

    pub fn size(&self) -> usize {
        self.entries.len()
    }

    /// Total adapter parameters across all bundles.
    pub fn param_count(&self) -> usize {
        self.entries.values().map(|b| b.param_count()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn entries(&self) -> &BTreeMap<String, AdapterBundle> {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Result<&AdapterBundle> {
        self.entries
            .get(id)
            .ok_or_else(|| Error::MissingAdapter(id.to_string()))
    }

    /// DAT pools hold N_L + N_G bundles, DATM pools 2·N_G; baseline pools
    /// have no size law.
    pub fn check_size(&self, registry: &Registry) -> Result<()> {
        let expect = match self.mode {
            PoolMode::Dat | PoolMode::Datm => pool_size(
                self.mode,
                registry.n_non_english(),
                registry.n_groups() as usize,
            )?,
            PoolMode::Baseline(_) => return Ok(()),
        };
        if self.size() != expect {
            return Err(Error::Validation(format!(
                "{} pool has {} entries, expected {expect}",
                self.mode,
                self.size()
            )));
        }
        Ok(())
    }
}

/// Expected pool size under each mode.
pub fn pool_size(mode: PoolMode, n_l: usize, n_g: usize) -> Result<usize> {
    if n_g == 0 || n_l < n_g {
        return Err(Error::BadCounts(format!(
            "need n_l >= n_g >= 1, got n_l={n_l}, n_g={n_g}"
        )));
    }
    match mode {
        PoolMode::Dat => Ok(n_l + n_g),
        PoolMode::Datm => Ok(2 * n_g),
        PoolMode::Baseline(_) => Err(Error::ModeError(
            "baseline pools have no size law".into(),
        )),
    }
}

/// The routing law alone: which adapter id serves `task` under `mode`.
/// Needs no pool, so it can answer "where would this request go" before
/// anything has been trained.
pub fn route_id(mode: PoolMode, task: &TranslationTask, registry: &Registry) -> Result<String> {
    // Re-validate through the registry: both sides known, exactly one English.
    let task = registry.task(&task.src, &task.dst)?;
    match (mode, task.direction()) {
        (PoolMode::Dat, Direction::IntoEnglish) => Ok(format!("sep:{}-en", task.src)),
        (PoolMode::Datm, Direction::IntoEnglish) => {
            Ok(format!("mrg:{}:xx-en", registry.group_of(&task.src)?))
        }
        (PoolMode::Dat | PoolMode::Datm, Direction::FromEnglish) => {
            Ok(format!("grp:{}:en-xx", registry.group_of(&task.dst)?))
        }
        (PoolMode::Baseline(_), _) => Err(Error::ModeError(format!(
            "cannot route with a {mode} pool; routing needs dat or datm"
        ))),
    }
}

/// Adapter id for a task under the pool's routing law, checked for presence.
pub fn route(pool: &AdapterPool, task: &TranslationTask, registry: &Registry) -> Result<String> {
    let id = route_id(pool.mode, task, registry)?;
    pool.get(&id)?;
    Ok(id)
}

/// Scoring-time bundle selection. Unlike [`route`], which only serves
/// dat/datm pools, this also resolves baseline pools by the assignment
/// their strategy used at training time, so every pool can be evaluated.
pub fn assign_bundle(
    pool: &AdapterPool,
    task: &TranslationTask,
    registry: &Registry,
) -> Result<String> {
    use crate::training::Strategy;
    let task = registry.task(&task.src, &task.dst)?;
    let id = match pool.mode {
        PoolMode::Dat | PoolMode::Datm => return route(pool, &task, registry),
        PoolMode::Baseline(Strategy::Multilingual) => "mul:all".to_string(),
        PoolMode::Baseline(Strategy::GroupMultilingual) => {
            format!("gmx:{}", registry.group_of(task.foreign())?)
        }
        PoolMode::Baseline(Strategy::Separate) => format!("sep:{task}"),
        PoolMode::Baseline(Strategy::DirectionAware) => {
            return Err(Error::ModeError(
                "direction-aware pools carry the dat mode, not baseline".into(),
            ))
        }
    };
    pool.get(&id)?;
    Ok(id)
}

/// Route, apply the adapter lazily, and greedy-decode the target tokens.
/// The decode budget is whatever context remains after the prompt.
pub fn translate(
    pool: &AdapterPool,
    base: &BaseModel,
    vocab: &Vocab,
    task: &TranslationTask,
    src: &[u32],
    registry: &Registry,
) -> Result<Vec<u32>> {
    let id = route(pool, task, registry)?;
    let bundle = pool.get(&id)?;
    let prefix = vocab.prefix(&task.dst, src)?;
    let prepared = Prepared::new(base, Some(bundle))?;
    let max_new = base.cfg.max_seq.saturating_sub(prefix.len());
    let decoded = prepared.greedy_decode(&prefix, max_new, vocab.eos())?;
    Ok(vocab.extract_target(&decoded, prefix.len()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolEntryMeta {
    pub id: String,
    /// Bundle file, relative to the pool directory.
    pub path: String,
    pub direction: AdapterDirection,
    pub languages: Vec<String>,
    /// Set when every covered language belongs to one group.
    pub group: Option<u8>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolManifest {
    pub mode: String,
    pub base_checkpoint: String,
    pub entries: Vec<PoolEntryMeta>,
}

pub const POOL_MANIFEST: &str = "pool.json";

fn bundle_file_name(id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{safe}.datb")
}

fn common_group(bundle: &AdapterBundle, registry: &Registry) -> Option<u8> {
    let mut groups = bundle
        .meta
        .languages
        .iter()
        .map(|code| registry.group_of(code).ok());
    let first = groups.next()??;
    if groups.all(|g| g == Some(first)) {
        Some(first)
    } else {
        None
    }
}

/// Write every bundle plus a `pool.json` manifest into `dir`.
pub fn save_pool(
    pool: &AdapterPool,
    registry: &Registry,
    base_checkpoint: &str,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(pool.size());
    for (id, bundle) in pool.entries() {
        let fname = bundle_file_name(id);
        save_bundle(bundle, dir.join(&fname))?;
        entries.push(PoolEntryMeta {
            id: id.clone(),
            path: fname,
            direction: bundle.meta.direction,
            languages: bundle.meta.languages.clone(),
            group: common_group(bundle, registry),
        });
    }
    let manifest = PoolManifest {
        mode: pool.mode.to_string(),
        base_checkpoint: base_checkpoint.to_string(),
        entries,
    };
    let mpath = dir.join(POOL_MANIFEST);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))
}

/// Load a pool directory written by [`save_pool`].
pub fn load_pool(dir: &Path) -> Result<(AdapterPool, PoolManifest)> {
    let mpath = dir.join(POOL_MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: PoolManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("bad pool manifest {}: {e}", mpath.display())))?;
    let mode: PoolMode = manifest.mode.parse()?;
    let mut entries = BTreeMap::new();
    for entry in &manifest.entries {
        let bundle = load_bundle(dir.join(&entry.path))?;
        if bundle.meta.id != entry.id {
            return Err(Error::Format(format!(
                "bundle file {} holds id '{}', manifest says '{}'",
                entry.path, bundle.meta.id, entry.id
            )));
        }
        entries.insert(entry.id.clone(), bundle);
    }
    Ok((AdapterPool::new(mode, entries)?, manifest))
}
