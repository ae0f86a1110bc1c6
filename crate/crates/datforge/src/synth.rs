//! Synthetic translation benchmark.
//!
//! Each synthetic language ℓ is a cipher over a shared content vocabulary:
//! a group-level permutation σ_g composed with a small language-local
//! deviation ρ_ℓ that moves at most ⌈s·|C|⌉ symbols, so π_ℓ = σ_g ∘ ρ_ℓ.
//! Languages in one group therefore agree on at least a 1−2s fraction of
//! symbols, while languages from different groups agree only by chance.
//! "English" is the identity cipher: a translation pair is an English token
//! sentence and its image under π_ℓ.
//!
//! Everything downstream of a [`SynthSpec`] is a pure function of the spec:
//! corpora are drawn from seed streams derived per (language, split), and
//! both directions of a task share the same underlying sentence pairs.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::registry::{Direction, LanguageInfo, Registry, Resource, TranslationTask, ENGLISH};
use crate::rng::{derive_seed, fnv1a64, SplitMix64};

/// Per-resource-tier training corpus sizes (in sentence pairs).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSizes {
    #[serde(default = "default_high")]
    pub high: usize,
    #[serde(default = "default_mid")]
    pub mid: usize,
    #[serde(default = "default_low")]
    pub low: usize,
}

fn default_high() -> usize {
    2000
}
fn default_mid() -> usize {
    800
}
fn default_low() -> usize {
    200
}

impl Default for CorpusSizes {
    fn default() -> Self {
        CorpusSizes {
            high: default_high(),
            mid: default_mid(),
            low: default_low(),
        }
    }
}

impl CorpusSizes {
    pub fn for_resource(&self, r: Resource) -> usize {
        match r {
            Resource::High => self.high,
            Resource::Mid => self.mid,
            Resource::Low => self.low,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(default = "default_n_groups")]
    pub n_groups: usize,
    #[serde(default = "default_langs_per_group")]
    pub langs_per_group: usize,
    /// Content vocabulary size |C|.
    #[serde(default = "default_content_vocab")]
    pub content_vocab: usize,
    /// Fraction s of |C| a language-local deviation may move.
    #[serde(default = "default_local_subset_frac")]
    pub local_subset_frac: f64,
    /// Zipf exponent for English token frequencies; 0 means uniform.
    #[serde(default = "default_zipf_alpha")]
    pub zipf_alpha: f64,
    /// Inclusive sentence length range [lo, hi].
    #[serde(default = "default_sent_len_range")]
    pub sent_len_range: [usize; 2],
    #[serde(default)]
    pub corpus_sizes: CorpusSizes,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_n_groups() -> usize {
    4
}
fn default_langs_per_group() -> usize {
    3
}
fn default_content_vocab() -> usize {
    64
}
fn default_local_subset_frac() -> f64 {
    0.25
}
fn default_zipf_alpha() -> f64 {
    1.0
}
fn default_sent_len_range() -> [usize; 2] {
    [4, 12]
}
fn default_test_size() -> usize {
    200
}

impl Default for SynthSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are well-formed")
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.content_vocab < 8 {
            return Err(Error::Validation(format!(
                "content vocab must be at least 8, got {}",
                self.content_vocab
            )));
        }
        if !(self.local_subset_frac > 0.0 && self.local_subset_frac <= 0.5) {
            return Err(Error::Validation(format!(
                "local subset fraction must lie in (0, 0.5], got {}",
                self.local_subset_frac
            )));
        }
        if self.n_groups == 0 || self.langs_per_group == 0 {
            return Err(Error::Validation(
                "need at least one group and one language per group".into(),
            ));
        }
        if self.n_groups > 255 {
            return Err(Error::Validation(format!(
                "at most 255 groups supported, got {}",
                self.n_groups
            )));
        }
        if !(self.zipf_alpha >= 0.0 && self.zipf_alpha.is_finite()) {
            return Err(Error::Validation(format!(
                "zipf alpha must be finite and non-negative, got {}",
                self.zipf_alpha
            )));
        }
        let [lo, hi] = self.sent_len_range;
        if lo == 0 || lo > hi {
            return Err(Error::Validation(format!(
                "sentence length range must satisfy 1 <= lo <= hi, got [{lo}, {hi}]"
            )));
        }
        if self.corpus_sizes.high == 0
            || self.corpus_sizes.mid == 0
            || self.corpus_sizes.low == 0
            || self.test_size == 0
        {
            return Err(Error::Validation("corpus sizes must be positive".into()));
        }
        Ok(())
    }

    /// Size of a language's local deviation subset, ⌈s·|C|⌉.
    pub fn subset_size(&self) -> usize {
        (self.local_subset_frac * self.content_vocab as f64).ceil() as usize
    }
}

/// A generated cipher language: its registry identity plus the full
/// permutation π over the content vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthLanguage {
    pub code: String,
    pub group: u8,
    pub resource: Resource,
    pub pi: Vec<u32>,
}

impl SynthLanguage {
    pub fn apply(&self, tokens: &[u32]) -> Vec<u32> {
        tokens.iter().map(|&t| self.pi[t as usize]).collect()
    }
}

/// π = σ ∘ ρ, i.e. π(c) = σ(ρ(c)).
pub fn compose(sigma: &[u32], rho: &[u32]) -> Vec<u32> {
    rho.iter().map(|&r| sigma[r as usize]).collect()
}

fn is_permutation(pi: &[u32]) -> bool {
    let mut seen = vec![false; pi.len()];
    for &p in pi {
        let i = p as usize;
        if i >= pi.len() || seen[i] {
            return false;
        }
        seen[i] = true;
    }
    true
}

/// Build the synthetic language set and its registry.
///
/// Codes are `g{group}l{index}`; resources rotate High → Mid → Low within
/// each group. The registry carries English plus every cipher language.
pub fn build_languages(spec: &SynthSpec) -> Result<(Registry, BTreeMap<String, SynthLanguage>)> {
    spec.validate()?;
    let c = spec.content_vocab;
    let m = spec.subset_size();

    let mut entries = vec![LanguageInfo {
        code: ENGLISH.to_string(),
        script: "Latin".to_string(),
        family: "Indo-European".to_string(),
        subgroup: "Germanic".to_string(),
        resource: Resource::High,
        group: None,
    }];
    let mut langs = BTreeMap::new();

    for g in 1..=spec.n_groups {
        let mut sigma: Vec<u32> = (0..c as u32).collect();
        let mut grng = SplitMix64::new(derive_seed(spec.seed, &format!("sigma:g{g}")));
        grng.shuffle(&mut sigma);

        for i in 0..spec.langs_per_group {
            let code = format!("g{g}l{i}");
            let mut lrng = SplitMix64::new(derive_seed(spec.seed, &format!("rho:{code}")));

            // Pick the deviation subset S_ℓ, then permute images within it;
            // ρ is the identity everywhere else.
            let mut order: Vec<usize> = (0..c).collect();
            lrng.shuffle(&mut order);
            let subset = &order[..m];
            let mut images: Vec<usize> = subset.to_vec();
            lrng.shuffle(&mut images);
            let mut rho: Vec<u32> = (0..c as u32).collect();
            for (&pos, &img) in subset.iter().zip(images.iter()) {
                rho[pos] = img as u32;
            }

            let pi = compose(&sigma, &rho);
            debug_assert!(is_permutation(&pi));

            let resource = match i % 3 {
                0 => Resource::High,
                1 => Resource::Mid,
                _ => Resource::Low,
            };
            entries.push(LanguageInfo {
                code: code.clone(),
                script: "Cipher".to_string(),
                family: "Synthetic".to_string(),
                subgroup: format!("Group {g}"),
                resource,
                group: Some(g as u8),
            });
            langs.insert(
                code.clone(),
                SynthLanguage {
                    code,
                    group: g as u8,
                    resource,
                    pi,
                },
            );
        }
    }

    let registry = Registry::from_entries(entries, false)?;
    Ok((registry, langs))
}

/// Fraction of content symbols two languages map identically.
pub fn group_agreement(a: &SynthLanguage, b: &SynthLanguage) -> Result<f64> {
    if a.pi.len() != b.pi.len() {
        return Err(Error::LengthMismatch(format!(
            "permutation sizes differ: {} vs {}",
            a.pi.len(),
            b.pi.len()
        )));
    }
    let same = a.pi.iter().zip(b.pi.iter()).filter(|(x, y)| x == y).count();
    Ok(same as f64 / a.pi.len() as f64)
}

/// Zipf distribution over `0..n` with exponent alpha, sampled by CDF
/// inversion so a single `next_f64` draw yields one token.
pub struct Zipf {
    cdf: Vec<f64>,
}

impl Zipf {
    pub fn new(n: usize, alpha: f64) -> Zipf {
        let weights: Vec<f64> = (0..n).map(|k| ((k + 1) as f64).powf(-alpha)).collect();
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        if let Some(last) = cdf.last_mut() {
            *last = 1.0;
        }
        Zipf { cdf }
    }

    pub fn sample(&self, rng: &mut SplitMix64) -> usize {
        let u = rng.next_f64();
        self.cdf.partition_point(|&c| c < u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// A parallel corpus for one task and split. `pairs` holds (src, tgt)
/// content-token sentences, in generation order.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub task: TranslationTask,
    pub split: Split,
    pub pairs: Vec<(Vec<u32>, Vec<u32>)>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn draw_sentence(rng: &mut SplitMix64, zipf: &Zipf, lo: usize, hi: usize) -> Vec<u32> {
    let len = lo + rng.next_below(hi - lo + 1);
    (0..len).map(|_| zipf.sample(rng) as u32).collect()
}

/// English source sentences for one (language, split) pair.
///
/// The test stream rejects any sentence that already occurs in the train
/// stream, so the two splits never share a source sentence. Both directions
/// of a task reuse the same sources, so ℓ→En is exactly En→ℓ reversed.
fn english_sources(spec: &SynthSpec, lang: &SynthLanguage, split: Split) -> Result<Vec<Vec<u32>>> {
    let zipf = Zipf::new(spec.content_vocab, spec.zipf_alpha);
    let [lo, hi] = spec.sent_len_range;
    let train_count = spec.corpus_sizes.for_resource(lang.resource);

    let mut train_rng = SplitMix64::new(derive_seed(
        spec.seed,
        &format!("corpus:{}:train", lang.code),
    ));
    let train: Vec<Vec<u32>> = (0..train_count)
        .map(|_| draw_sentence(&mut train_rng, &zipf, lo, hi))
        .collect();
    if split == Split::Train {
        return Ok(train);
    }

    let seen: HashSet<&[u32]> = train.iter().map(|s| s.as_slice()).collect();
    let mut test_rng = SplitMix64::new(derive_seed(
        spec.seed,
        &format!("corpus:{}:test", lang.code),
    ));
    let mut out = Vec::with_capacity(spec.test_size);
    for _ in 0..spec.test_size {
        let mut tries = 0;
        let sent = loop {
            let s = draw_sentence(&mut test_rng, &zipf, lo, hi);
            if !seen.contains(s.as_slice()) {
                break s;
            }
            tries += 1;
            if tries > 10_000 {
                return Err(Error::Validation(
                    "sentence space too small to keep train and test sources disjoint".into(),
                ));
            }
        };
        out.push(sent);
    }
    Ok(out)
}

/// Generate the corpus for one (language, direction, split) triple.
pub fn gen_corpus(
    spec: &SynthSpec,
    lang: &SynthLanguage,
    direction: Direction,
    split: Split,
) -> Result<Corpus> {
    spec.validate()?;
    if lang.pi.len() != spec.content_vocab {
        return Err(Error::LengthMismatch(format!(
            "language {} has permutation size {}, spec says {}",
            lang.code,
            lang.pi.len(),
            spec.content_vocab
        )));
    }
    let sources = english_sources(spec, lang, split)?;
    let pairs = sources
        .into_iter()
        .map(|e| {
            let f = lang.apply(&e);
            match direction {
                Direction::FromEnglish => (e, f),
                Direction::IntoEnglish => (f, e),
            }
        })
        .collect();
    let task = match direction {
        Direction::FromEnglish => TranslationTask {
            src: ENGLISH.to_string(),
            dst: lang.code.clone(),
        },
        Direction::IntoEnglish => TranslationTask {
            src: lang.code.clone(),
            dst: ENGLISH.to_string(),
        },
    };
    Ok(Corpus { task, split, pairs })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PairLine {
    src: Vec<u32>,
    tgt: Vec<u32>,
}

/// Sidecar metadata written next to each corpus file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub spec: SynthSpec,
    pub task: String,
    pub split: Split,
    pub count: usize,
    pub content_hash: String,
}

/// "foo/de-en.train.jsonl" → "foo/de-en.train.manifest.json"
pub fn manifest_path(corpus_path: &Path) -> PathBuf {
    corpus_path.with_extension("manifest.json")
}

pub fn corpus_file_name(task: &TranslationTask, split: Split) -> String {
    format!("{task}.{split}.jsonl")
}

fn corpus_to_jsonl(corpus: &Corpus) -> String {
    let mut out = String::new();
    for (src, tgt) in &corpus.pairs {
        let line = PairLine {
            src: src.clone(),
            tgt: tgt.clone(),
        };
        out.push_str(&serde_json::to_string(&line).expect("pair serializes"));
        out.push('\n');
    }
    out
}

/// Write the corpus as JSONL plus its manifest sidecar.
pub fn save_corpus(corpus: &Corpus, spec: &SynthSpec, path: &Path) -> Result<()> {
    let body = corpus_to_jsonl(corpus);
    let manifest = CorpusManifest {
        spec: spec.clone(),
        task: corpus.task.to_string(),
        split: corpus.split,
        count: corpus.pairs.len(),
        content_hash: format!("{:016x}", fnv1a64(body.as_bytes())),
    };
    fs::write(path, body).map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    let mut mjson = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    mjson.push('\n');
    fs::write(&mpath, mjson).map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

/// Load a corpus, verifying the manifest's count and content hash.
pub fn load_corpus(path: &Path) -> Result<(Corpus, CorpusManifest)> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    let mtext = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: CorpusManifest = serde_json::from_str(&mtext)
        .map_err(|e| Error::Format(format!("bad corpus manifest {}: {e}", mpath.display())))?;

    let hash = format!("{:016x}", fnv1a64(body.as_bytes()));
    if hash != manifest.content_hash {
        return Err(Error::Format(format!(
            "corpus {} content hash {} does not match manifest {}",
            path.display(),
            hash,
            manifest.content_hash
        )));
    }
    let mut pairs = Vec::new();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: PairLine = serde_json::from_str(line).map_err(|e| {
            Error::Format(format!("corpus {} line {}: {e}", path.display(), i + 1))
        })?;
        pairs.push((p.src, p.tgt));
    }
    if pairs.len() != manifest.count {
        return Err(Error::Format(format!(
            "corpus {} has {} pairs, manifest says {}",
            path.display(),
            pairs.len(),
            manifest.count
        )));
    }
    let task = TranslationTask::parse(&manifest.task)?;
    Ok((
        Corpus {
            task,
            split: manifest.split,
            pairs,
        },
        manifest,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SynthSpec {
        SynthSpec {
            n_groups: 2,
            langs_per_group: 3,
            content_vocab: 16,
            local_subset_frac: 0.25,
            zipf_alpha: 1.0,
            sent_len_range: [3, 6],
            corpus_sizes: CorpusSizes {
                high: 40,
                mid: 20,
                low: 10,
            },
            test_size: 12,
            seed: 7,
        }
    }

    #[test]
    fn composition_matches_hand_example() {
        // σ rotates by one, ρ swaps symbols 0 and 1 over an 8-symbol vocab.
        let sigma: Vec<u32> = (0..8).map(|c| (c + 1) % 8).collect();
        let mut rho: Vec<u32> = (0..8).collect();
        rho.swap(0, 1);
        let pi = compose(&sigma, &rho);
        assert_eq!(pi[0], 2); // ρ(0)=1, σ(1)=2
        assert_eq!(pi[1], 1); // ρ(1)=0, σ(0)=1
        assert_eq!(pi[2], 3); // untouched by ρ
        assert!(is_permutation(&pi));
    }

    #[test]
    fn identity_deviation_recovers_group_cipher() {
        let sigma: Vec<u32> = vec![3, 0, 2, 1];
        let rho: Vec<u32> = (0..4).collect();
        assert_eq!(compose(&sigma, &rho), sigma);
    }

    #[test]
    fn default_spec_matches_documented_values() {
        let spec = SynthSpec::default();
        assert_eq!(spec.n_groups, 4);
        assert_eq!(spec.langs_per_group, 3);
        assert_eq!(spec.content_vocab, 64);
        assert_eq!(spec.local_subset_frac, 0.25);
        assert_eq!(spec.zipf_alpha, 1.0);
        assert_eq!(spec.sent_len_range, [4, 12]);
        assert_eq!(spec.corpus_sizes.high, 2000);
        assert_eq!(spec.corpus_sizes.mid, 800);
        assert_eq!(spec.corpus_sizes.low, 200);
        assert_eq!(spec.test_size, 200);
        spec.validate().unwrap();
    }

    #[test]
    fn spec_validation_rejects_bad_values() {
        let mut s = SynthSpec::default();
        s.content_vocab = 7;
        assert!(s.validate().is_err());
        let mut s = SynthSpec::default();
        s.local_subset_frac = 0.6;
        assert!(s.validate().is_err());
        let mut s = SynthSpec::default();
        s.local_subset_frac = 0.0;
        assert!(s.validate().is_err());
        let mut s = SynthSpec::default();
        s.sent_len_range = [5, 4];
        assert!(s.validate().is_err());
        let mut s = SynthSpec::default();
        s.test_size = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn languages_are_permutations_with_round_robin_resources() {
        let spec = tiny_spec();
        let (reg, langs) = build_languages(&spec).unwrap();
        assert_eq!(reg.n_non_english(), 6);
        assert_eq!(reg.n_groups(), 2);
        assert_eq!(reg.group_sizes(), vec![3, 3]);
        for lang in langs.values() {
            assert!(is_permutation(&lang.pi));
        }
        assert_eq!(langs["g1l0"].resource, Resource::High);
        assert_eq!(langs["g1l1"].resource, Resource::Mid);
        assert_eq!(langs["g1l2"].resource, Resource::Low);
        assert_eq!(langs["g2l0"].resource, Resource::High);
        assert_eq!(reg.group_of("g2l1").unwrap(), 2);
        // Same spec, same languages.
        let (_, again) = build_languages(&spec).unwrap();
        assert_eq!(langs, again);
    }

    #[test]
    fn agreement_is_high_within_groups_and_low_across() {
        let spec = SynthSpec::default();
        let (_, langs) = build_languages(&spec).unwrap();
        let codes: Vec<&String> = langs.keys().collect();
        let bound = 1.0 - 2.0 * spec.local_subset_frac;
        for (i, a) in codes.iter().enumerate() {
            for b in codes.iter().skip(i + 1) {
                let agree = group_agreement(&langs[*a], &langs[*b]).unwrap();
                if langs[*a].group == langs[*b].group {
                    assert!(
                        agree >= bound,
                        "{a} vs {b}: same-group agreement {agree} below {bound}"
                    );
                } else {
                    assert!(
                        agree <= 0.2,
                        "{a} vs {b}: cross-group agreement {agree} above 0.2"
                    );
                }
            }
        }
    }

    #[test]
    fn zipf_matches_hand_computed_cdf() {
        let z = Zipf::new(4, 1.0);
        let h = 1.0 + 0.5 + 1.0 / 3.0 + 0.25;
        assert!((z.cdf[0] - 1.0 / h).abs() < 1e-12);
        assert!((z.cdf[1] - 1.5 / h).abs() < 1e-12);
        assert_eq!(z.cdf[3], 1.0);
        // alpha = 0 degenerates to the uniform distribution.
        let u = Zipf::new(5, 0.0);
        for (i, c) in u.cdf.iter().enumerate() {
            assert!((c - (i + 1) as f64 / 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zipf_sampling_is_skewed_and_in_range() {
        let z = Zipf::new(16, 1.0);
        let mut rng = SplitMix64::new(11);
        let mut counts = [0usize; 16];
        for _ in 0..20_000 {
            counts[z.sample(&mut rng)] += 1;
        }
        assert!(counts[0] > counts[8]);
        assert!(counts[0] > 2 * counts[15]);
        assert!(counts.iter().all(|&c| c > 0));
    }

    #[test]
    fn corpora_are_cipher_images_and_direction_consistent() {
        let spec = tiny_spec();
        let (_, langs) = build_languages(&spec).unwrap();
        let lang = &langs["g1l1"];
        let fwd = gen_corpus(&spec, lang, Direction::FromEnglish, Split::Train).unwrap();
        let rev = gen_corpus(&spec, lang, Direction::IntoEnglish, Split::Train).unwrap();
        assert_eq!(fwd.pairs.len(), spec.corpus_sizes.mid);
        assert_eq!(fwd.task.to_string(), "en-g1l1");
        assert_eq!(rev.task.to_string(), "g1l1-en");
        for ((e, f), (f2, e2)) in fwd.pairs.iter().zip(rev.pairs.iter()) {
            assert_eq!(lang.apply(e), *f);
            // Reverse direction is literally the same pairs, swapped.
            assert_eq!(e, e2);
            assert_eq!(f, f2);
        }
        let [lo, hi] = spec.sent_len_range;
        assert!(fwd.pairs.iter().all(|(e, _)| e.len() >= lo && e.len() <= hi));
    }

    #[test]
    fn train_and_test_sources_are_disjoint() {
        let spec = tiny_spec();
        let (_, langs) = build_languages(&spec).unwrap();
        let lang = &langs["g2l2"];
        let train = gen_corpus(&spec, lang, Direction::IntoEnglish, Split::Train).unwrap();
        let test = gen_corpus(&spec, lang, Direction::IntoEnglish, Split::Test).unwrap();
        assert_eq!(test.pairs.len(), spec.test_size);
        let train_src: HashSet<&Vec<u32>> = train.pairs.iter().map(|(s, _)| s).collect();
        for (s, _) in &test.pairs {
            assert!(!train_src.contains(s), "test source leaked from train");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = tiny_spec();
        let (_, langs) = build_languages(&spec).unwrap();
        let lang = &langs["g1l0"];
        let a = gen_corpus(&spec, lang, Direction::FromEnglish, Split::Test).unwrap();
        let b = gen_corpus(&spec, lang, Direction::FromEnglish, Split::Test).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corpus_files_round_trip_and_reject_tampering() {
        let spec = tiny_spec();
        let (_, langs) = build_languages(&spec).unwrap();
        let lang = &langs["g1l2"];
        let corpus = gen_corpus(&spec, lang, Direction::IntoEnglish, Split::Test).unwrap();

        let dir = std::env::temp_dir().join(format!("datforge-synth-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join(corpus_file_name(&corpus.task, corpus.split));
        assert_eq!(path.file_name().unwrap(), "g1l2-en.test.jsonl");
        save_corpus(&corpus, &spec, &path).unwrap();

        let (loaded, manifest) = load_corpus(&path).unwrap();
        assert_eq!(loaded, corpus);
        assert_eq!(manifest.count, corpus.pairs.len());
        assert_eq!(manifest.task, "g1l2-en");

        // Flip a byte in the data: the hash check must catch it.
        let mut bytes = fs::read(&path).unwrap();
        let pos = bytes.iter().position(|&b| b.is_ascii_digit()).unwrap();
        bytes[pos] = if bytes[pos] == b'1' { b'2' } else { b'1' };
        fs::write(&path, &bytes).unwrap();
        assert!(load_corpus(&path).is_err());
        fs::remove_dir_all(&dir).ok();
    }
}
