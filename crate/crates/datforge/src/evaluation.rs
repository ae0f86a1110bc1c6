//! Desk-scale metrics (token accuracy, exact match, BLEU-4), the
//! conflict/synergy delta classification, asymmetry reports, and the
//! per-parameter merge-degradation statistic.
//!
//! Token accuracy is the headline metric here: candidates and references
//! are token-id sequences over cipher vocabularies, so neural metrics have
//! nothing to add. BLEU is the classic corpus-level BLEU-4 with add-one
//! smoothing on zero higher-order precisions.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::{Direction, Registry, Resource, TranslationTask};
use crate::routing::{assign_bundle, AdapterPool};
use crate::synth::{Corpus, Split};
use crate::toymodel::{BaseModel, Prepared};
use crate::vocab::Vocab;

/// The three desk metrics, each in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub token_accuracy: f64,
    pub exact_match: f64,
    pub bleu: f64,
}

fn check_counts(candidates: &[Vec<u32>], references: &[Vec<u32>]) -> Result<()> {
    if candidates.len() != references.len() {
        return Err(Error::LengthMismatch(format!(
            "{} candidates vs {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::EmptyInput("no sentence pairs to score".into()));
    }
    Ok(())
}

/// Corpus-level BLEU-4: BP · exp(¼ Σ ln p_n), modified n-gram precisions
/// pooled over the corpus, add-one smoothing when a precision of order
/// n ≥ 2 is zero, BP = min(1, exp(1 − ref_len/cand_len)). An empty
/// candidate corpus scores 0.
pub fn corpus_bleu(candidates: &[Vec<u32>], references: &[Vec<u32>]) -> Result<f64> {
    check_counts(candidates, references)?;
    let cand_len: usize = candidates.iter().map(|c| c.len()).sum();
    let ref_len: usize = references.iter().map(|r| r.len()).sum();
    if cand_len == 0 {
        return Ok(0.0);
    }

    let mut log_sum = 0.0;
    for n in 1..=4usize {
        let mut clipped = 0usize;
        let mut total = 0usize;
        for (cand, refr) in candidates.iter().zip(references) {
            if cand.len() < n {
                continue;
            }
            let mut ref_counts: HashMap<&[u32], usize> = HashMap::new();
            if refr.len() >= n {
                for gram in refr.windows(n) {
                    *ref_counts.entry(gram).or_insert(0) += 1;
                }
            }
            let mut cand_counts: HashMap<&[u32], usize> = HashMap::new();
            for gram in cand.windows(n) {
                *cand_counts.entry(gram).or_insert(0) += 1;
            }
            total += cand.len() - n + 1;
            for (gram, count) in cand_counts {
                clipped += count.min(ref_counts.get(gram).copied().unwrap_or(0));
            }
        }
        let precision = if clipped > 0 {
            clipped as f64 / total as f64
        } else if n >= 2 {
            // Add-one smoothing; also covers corpora too short to have any
            // n-gram of this order at all.
            (clipped + 1) as f64 / (total + 1) as f64
        } else {
            return Ok(0.0); // no unigram overlap anywhere
        };
        log_sum += precision.ln();
    }

    let bp = (1.0 - ref_len as f64 / cand_len as f64).exp().min(1.0);
    Ok(bp * (0.25 * log_sum).exp())
}

/// Position-wise accuracy pooled over the corpus:
/// Σ matches / Σ max(|ref|, |cand|).
pub fn token_accuracy(candidates: &[Vec<u32>], references: &[Vec<u32>]) -> Result<f64> {
    check_counts(candidates, references)?;
    let mut matches = 0usize;
    let mut denom = 0usize;
    for (cand, refr) in candidates.iter().zip(references) {
        matches += cand.iter().zip(refr).filter(|(c, r)| c == r).count();
        denom += cand.len().max(refr.len());
    }
    if denom == 0 {
        return Err(Error::EmptyInput("all sentence pairs are empty".into()));
    }
    Ok(matches as f64 / denom as f64)
}

/// Fraction of candidates equal to their reference.
pub fn exact_match(candidates: &[Vec<u32>], references: &[Vec<u32>]) -> Result<f64> {
    check_counts(candidates, references)?;
    let hits = candidates.iter().zip(references).filter(|(c, r)| c == r).count();
    Ok(hits as f64 / candidates.len() as f64)
}

/// All three metrics over one decoded corpus.
pub fn score_pairs(candidates: &[Vec<u32>], references: &[Vec<u32>]) -> Result<Score> {
    Ok(Score {
        token_accuracy: token_accuracy(candidates, references)?,
        exact_match: exact_match(candidates, references)?,
        bleu: corpus_bleu(candidates, references)?,
    })
}

/// Decode every source of a test corpus with the pool's bundle for that
/// task and score against the references. Deterministic: greedy decoding,
/// one bundle, fixed order.
pub fn score_task(
    pool: &AdapterPool,
    base: &BaseModel,
    vocab: &Vocab,
    registry: &Registry,
    corpus: &Corpus,
) -> Result<Score> {
    if corpus.split != Split::Test {
        return Err(Error::Validation(format!(
            "scoring wants the test split, got {} for {}",
            corpus.split, corpus.task
        )));
    }
    if corpus.pairs.is_empty() {
        return Err(Error::EmptyInput(format!("test corpus {} is empty", corpus.task)));
    }
    let id = assign_bundle(pool, &corpus.task, registry)?;
    let bundle = pool.get(&id)?;
    let prepared = Prepared::new(base, Some(bundle))?;
    let mut candidates = Vec::with_capacity(corpus.pairs.len());
    let mut references = Vec::with_capacity(corpus.pairs.len());
    for (src, tgt) in &corpus.pairs {
        let prefix = vocab.prefix(&corpus.task.dst, src)?;
        let max_new = base.cfg.max_seq.saturating_sub(prefix.len());
        let decoded = prepared.greedy_decode(&prefix, max_new, vocab.eos())?;
        candidates.push(vocab.extract_target(&decoded, prefix.len()));
        references.push(tgt.clone());
    }
    score_pairs(&candidates, &references)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Conflict,
    Synergy,
    Neutral,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Verdict::Conflict => write!(f, "conflict"),
            Verdict::Synergy => write!(f, "synergy"),
            Verdict::Neutral => write!(f, "neutral"),
        }
    }
}

/// delta = separate − multilingual; positive gaps are conflicts (separate
/// training wins), negative gaps are synergies.
pub fn delta_metric(separate: f64, multilingual: f64, threshold: f64) -> Result<(f64, Verdict)> {
    if !separate.is_finite() || !multilingual.is_finite() || !threshold.is_finite() {
        return Err(Error::Validation(format!(
            "delta needs finite inputs, got ({separate}, {multilingual}, {threshold})"
        )));
    }
    let delta = separate - multilingual;
    let verdict = if delta > threshold {
        Verdict::Conflict
    } else if delta < -threshold {
        Verdict::Synergy
    } else {
        Verdict::Neutral
    };
    Ok((delta, verdict))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRecord {
    pub task: TranslationTask,
    pub separate_score: f64,
    pub multilingual_score: f64,
    pub delta: f64,
    pub verdict: Verdict,
}

impl DeltaRecord {
    pub fn new(
        task: TranslationTask,
        separate_score: f64,
        multilingual_score: f64,
        threshold: f64,
    ) -> Result<DeltaRecord> {
        let (delta, verdict) = delta_metric(separate_score, multilingual_score, threshold)?;
        Ok(DeltaRecord {
            task,
            separate_score,
            multilingual_score,
            delta,
            verdict,
        })
    }
}

/// Mean deltas sliced by direction, language group, and resource level,
/// plus the raw records. Aggregates are plain arithmetic means, so they
/// are invariant under record permutation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymmetryReport {
    pub by_direction: BTreeMap<Direction, f64>,
    pub by_group: BTreeMap<u8, f64>,
    pub by_resource: BTreeMap<Resource, f64>,
    pub records: Vec<DeltaRecord>,
}

fn means<K: Ord>(buckets: BTreeMap<K, Vec<f64>>) -> BTreeMap<K, f64> {
    buckets
        .into_iter()
        .map(|(k, v)| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            (k, mean)
        })
        .collect()
}

pub fn asymmetry_report(records: &[DeltaRecord], registry: &Registry) -> Result<AsymmetryReport> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no delta records to aggregate".into()));
    }
    let mut by_direction: BTreeMap<Direction, Vec<f64>> = BTreeMap::new();
    let mut by_group: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
    let mut by_resource: BTreeMap<Resource, Vec<f64>> = BTreeMap::new();
    for r in records {
        let lang = registry.get(r.task.foreign())?;
        by_direction.entry(r.task.direction()).or_default().push(r.delta);
        by_group
            .entry(registry.group_of(&lang.code)?)
            .or_default()
            .push(r.delta);
        by_resource.entry(lang.resource).or_default().push(r.delta);
    }
    Ok(AsymmetryReport {
        by_direction: means(by_direction),
        by_group: means(by_group),
        by_resource: means(by_resource),
        records: records.to_vec(),
    })
}

/// Per-metric degradation rates of a merge, per parameter removed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Degradation {
    pub token_accuracy: f64,
    pub exact_match: f64,
    pub bleu: f64,
}

/// (before − after) / (params_before − params_after) per metric. No sign
/// or magnitude is enforced; improvements simply come out negative.
pub fn merge_degradation(
    before: &Score,
    after: &Score,
    params_before: usize,
    params_after: usize,
) -> Result<Degradation> {
    if params_before <= params_after {
        return Err(Error::BadCounts(format!(
            "degradation needs params_before > params_after, got {params_before} <= {params_after}"
        )));
    }
    let removed = (params_before - params_after) as f64;
    Ok(Degradation {
        token_accuracy: (before.token_accuracy - after.token_accuracy) / removed,
        exact_match: (before.exact_match - after.exact_match) / removed,
        bleu: (before.bleu - after.bleu) / removed,
    })
}

/// One line of the tabular reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run_id: String,
    pub task: String,
    pub direction: Direction,
    pub group: u8,
    pub resource: Resource,
    pub strategy: String,
    pub score: Score,
    pub delta: f64,
    pub verdict: Verdict,
}

pub const REPORT_CSV_HEADER: &str =
    "run_id,task,direction,group,resource,strategy,token_acc,exact_match,bleu,delta,verdict";

/// Fixed-precision float so reports are byte-stable.
pub fn fmt_metric(v: f64) -> String {
    format!("{v:.6}")
}

pub fn rows_to_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.run_id,
            r.task,
            r.direction,
            r.group,
            r.resource,
            r.strategy,
            fmt_metric(r.score.token_accuracy),
            fmt_metric(r.score.exact_match),
            fmt_metric(r.score.bleu),
            fmt_metric(r.delta),
            r.verdict,
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn seqs(xs: &[&[u32]]) -> Vec<Vec<u32>> {
        xs.iter().map(|s| s.to_vec()).collect()
    }

    #[test]
    fn bleu_identity_and_hand_case() {
        let cand = seqs(&[&[1, 2, 3, 4, 5]]);
        assert_eq!(corpus_bleu(&cand, &cand).unwrap(), 1.0);

        // Four matched tokens against a five-token reference: every
        // precision is 1, the brevity penalty is exp(1 - 5/4).
        let cand = seqs(&[&[1, 2, 3, 4]]);
        let refr = seqs(&[&[1, 2, 3, 4, 5]]);
        let got = corpus_bleu(&cand, &refr).unwrap();
        assert!((got - (-0.25f64).exp()).abs() <= 1e-6, "got {got}");

        // Identical short sequences still score 1: higher orders have no
        // grams on either side and smoothing returns 1 for them.
        let cand = seqs(&[&[7]]);
        assert_eq!(corpus_bleu(&cand, &cand).unwrap(), 1.0);
    }

    #[test]
    fn bleu_empty_candidate_and_count_mismatch() {
        let empty = seqs(&[&[]]);
        let refr = seqs(&[&[1, 2, 3]]);
        assert_eq!(corpus_bleu(&empty, &refr).unwrap(), 0.0);
        assert!(matches!(
            corpus_bleu(&seqs(&[&[1], &[2]]), &refr),
            Err(Error::LengthMismatch(_))
        ));
        assert!(matches!(corpus_bleu(&[], &[]), Err(Error::EmptyInput(_))));
        // No unigram overlap at all scores 0 (n = 1 is never smoothed).
        assert_eq!(
            corpus_bleu(&seqs(&[&[9, 9, 9, 9]]), &seqs(&[&[1, 2, 3, 4]])).unwrap(),
            0.0
        );
    }

    #[test]
    fn bleu_smoothing_matches_hand_computation() {
        // One substitution in the middle: p1 = 3/4, p2 = 1/3, p3 smoothed
        // to (0+1)/(2+1), p4 smoothed to (0+1)/(1+1); equal lengths so
        // BP = 1.
        let cand = seqs(&[&[1, 2, 9, 4]]);
        let refr = seqs(&[&[1, 2, 3, 4]]);
        let expect = (0.25 * (0.75f64.ln() + (1.0f64 / 3.0).ln() + (1.0f64 / 3.0).ln() + 0.5f64.ln())).exp();
        let got = corpus_bleu(&cand, &refr).unwrap();
        assert!((got - expect).abs() <= 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn bleu_is_one_only_for_exact_ngram_and_length_match() {
        // Seeded perturbations: any single-token change or reordering of
        // distinct tokens must knock BLEU below 1, while bit-identical
        // corpora always score exactly 1.
        let mut rng = SplitMix64::new(0x1eaf);
        for _ in 0..200 {
            let len = 4 + (rng.next_u64() % 10) as usize;
            let reference: Vec<u32> = (0..len).map(|_| (rng.next_u64() % 50) as u32).collect();
            let refs = vec![reference.clone()];
            assert_eq!(corpus_bleu(&[reference.clone()], &refs).unwrap(), 1.0);

            let mut mutated = reference.clone();
            let at = (rng.next_u64() as usize) % len;
            mutated[at] = mutated[at].wrapping_add(1 + (rng.next_u64() % 7) as u32) % 50;
            if mutated != reference {
                assert!(corpus_bleu(&[mutated], &refs).unwrap() < 1.0);
            }

            let mut rotated = reference.clone();
            rotated.rotate_left(1 + (rng.next_u64() as usize) % (len - 1));
            if rotated != reference {
                assert!(corpus_bleu(&[rotated], &refs).unwrap() < 1.0);
            }

            let shortened = reference[..len - 1].to_vec();
            assert!(corpus_bleu(&[shortened], &refs).unwrap() < 1.0);
        }
    }

    #[test]
    fn token_accuracy_and_exact_match_pool_over_the_corpus() {
        let cand = seqs(&[&[1], &[2, 3, 4, 5]]);
        let refr = seqs(&[&[1], &[2, 3, 4, 0]]);
        // (1 + 3) correct positions over (1 + 4) weighted slots.
        assert!((token_accuracy(&cand, &refr).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(exact_match(&cand, &refr).unwrap(), 0.5);

        // Length differences count against the score via the max().
        let cand = seqs(&[&[1, 2]]);
        let refr = seqs(&[&[1, 2, 3, 4]]);
        assert!((token_accuracy(&cand, &refr).unwrap() - 0.5).abs() < 1e-15);

        let s = score_pairs(&cand, &refr).unwrap();
        assert!(s.token_accuracy >= 0.0 && s.token_accuracy <= 1.0);
        assert!(s.bleu >= 0.0 && s.bleu <= 1.0);
        assert_eq!(s.exact_match, 0.0);
    }

    #[test]
    fn delta_metric_reproduces_reference_gaps() {
        // Group-1 averages from a published 50-language evaluation:
        // separate 88.45 vs multilingual 72.33 into English is a conflict
        // of 16.12; 86.62 vs 87.20 out of English is a synergy of 0.58.
        let (delta, verdict) = delta_metric(88.45, 72.33, 0.0).unwrap();
        assert!((delta - 16.12).abs() <= 0.005, "delta {delta}");
        assert_eq!(verdict, Verdict::Conflict);

        let (delta, verdict) = delta_metric(86.62, 87.20, 0.0).unwrap();
        assert!((delta + 0.58).abs() <= 0.005, "delta {delta}");
        assert_eq!(verdict, Verdict::Synergy);

        let (delta, verdict) = delta_metric(3.25, 3.25, 0.0).unwrap();
        assert_eq!(delta, 0.0);
        assert_eq!(verdict, Verdict::Neutral);

        assert!(delta_metric(f64::NAN, 1.0, 0.0).is_err());
        assert!(delta_metric(1.0, f64::INFINITY, 0.0).is_err());
    }

    #[test]
    fn delta_metric_is_antisymmetric_and_scale_invariant_at_zero_threshold() {
        let mut rng = SplitMix64::new(77);
        for _ in 0..500 {
            let a = (rng.next_u64() % 10_000) as f64 / 100.0;
            let b = (rng.next_u64() % 10_000) as f64 / 100.0;
            let (d1, v1) = delta_metric(a, b, 0.0).unwrap();
            let (d2, v2) = delta_metric(b, a, 0.0).unwrap();
            assert_eq!(d1, -d2);
            let swapped = match v1 {
                Verdict::Conflict => Verdict::Synergy,
                Verdict::Synergy => Verdict::Conflict,
                Verdict::Neutral => Verdict::Neutral,
            };
            assert_eq!(v2, swapped);
            // Positive rescaling preserves the sign of the gap.
            let scale = 1.0 + (rng.next_u64() % 50) as f64 / 10.0;
            let (_, v3) = delta_metric(a * scale, b * scale, 0.0).unwrap();
            assert_eq!(v1, v3);
        }
    }

    #[test]
    fn asymmetry_report_aggregates_are_arithmetic_means() {
        let registry = Registry::builtin();
        let rec = |task: &str, sep: f64, mul: f64| {
            DeltaRecord::new(TranslationTask::parse(task).unwrap(), sep, mul, 0.0).unwrap()
        };
        // Deltas: de-en 10, is-en 2, zh-en -4, en-de 1. Group and resource
        // slices pool both directions of a language: group 1 collects
        // de-en, is-en and en-de → (10 + 2 + 1)/3; High collects de-en,
        // zh-en and en-de → (10 - 4 + 1)/3.
        let records = vec![
            rec("de-en", 80.0, 70.0),
            rec("is-en", 52.0, 50.0),
            rec("zh-en", 60.0, 64.0),
            rec("en-de", 81.0, 80.0),
        ];
        let report = asymmetry_report(&records, &registry).unwrap();
        assert!((report.by_group[&1] - 13.0 / 3.0).abs() < 1e-12);
        assert_eq!(report.by_group[&6], -4.0);
        assert!((report.by_direction[&Direction::IntoEnglish] - 8.0 / 3.0).abs() < 1e-12);
        assert_eq!(report.by_direction[&Direction::FromEnglish], 1.0);
        assert!((report.by_resource[&Resource::High] - 7.0 / 3.0).abs() < 1e-12);
        assert_eq!(report.by_resource[&Resource::Low], 2.0);

        // Single record: every aggregate equals its delta.
        let one = vec![rec("az-en", 5.5, 4.0)];
        let report = asymmetry_report(&one, &registry).unwrap();
        assert_eq!(report.by_direction[&Direction::IntoEnglish], 1.5);
        assert_eq!(report.by_group[&8], 1.5);
        assert_eq!(report.by_resource[&Resource::Low], 1.5);

        // Permutation invariance.
        let mut shuffled = records.clone();
        shuffled.reverse();
        let a = asymmetry_report(&records, &registry).unwrap();
        let b = asymmetry_report(&shuffled, &registry).unwrap();
        assert_eq!(a.by_direction, b.by_direction);
        assert_eq!(a.by_group, b.by_group);
        assert_eq!(a.by_resource, b.by_resource);

        assert!(matches!(
            asymmetry_report(&[], &registry),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn asymmetry_report_reproduces_published_group_bars() {
        // Published per-group mean conflicts (into English) for a
        // 7B-parameter 50-language system. Feeding one record per group
        // with exactly those deltas must surface them unchanged in the
        // group slice — the aggregation adds nothing and loses nothing.
        let bars = [18.34, 19.202, 17.138, 16.182, 14.224, 12.734, 10.686, 13.285];
        let registry = Registry::builtin();
        let picks = ["de", "es", "ru", "fr", "pl", "zh", "hi", "ar"];
        let records: Vec<DeltaRecord> = picks
            .iter()
            .zip(bars)
            .map(|(code, delta)| {
                DeltaRecord::new(registry.task(code, "en").unwrap(), delta, 0.0, 0.0).unwrap()
            })
            .collect();
        let report = asymmetry_report(&records, &registry).unwrap();
        for (g, bar) in bars.iter().enumerate() {
            assert_eq!(report.by_group[&(g as u8 + 1)], *bar);
        }
        let overall = report.by_direction[&Direction::IntoEnglish];
        let mean = bars.iter().sum::<f64>() / bars.len() as f64;
        assert!((overall - mean).abs() < 1e-12);
    }

    #[test]
    fn merge_degradation_rates() {
        let before = Score {
            token_accuracy: 0.90,
            exact_match: 0.90,
            bleu: 0.90,
        };
        let after = Score {
            token_accuracy: 0.80,
            exact_match: 0.90,
            bleu: 0.95,
        };
        let d = merge_degradation(&before, &after, 2000, 1000).unwrap();
        assert!((d.token_accuracy - 1e-4).abs() < 1e-18);
        assert_eq!(d.exact_match, 0.0);
        assert!(d.bleu < 0.0, "improvements come out negative");

        assert!(matches!(
            merge_degradation(&before, &after, 1000, 1000),
            Err(Error::BadCounts(_))
        ));
        assert!(matches!(
            merge_degradation(&before, &after, 500, 1000),
            Err(Error::BadCounts(_))
        ));
    }

    #[test]
    fn score_task_spans_chance_to_perfect() {
        use crate::synth::{build_languages, CorpusSizes, SynthSpec};
        use crate::toymodel::ModelConfig;
        use std::collections::BTreeMap;

        let spec = SynthSpec {
            n_groups: 2,
            langs_per_group: 2,
            content_vocab: 16,
            sent_len_range: [3, 6],
            corpus_sizes: CorpusSizes {
                high: 8,
                mid: 8,
                low: 8,
            },
            test_size: 24,
            seed: 11,
            ..SynthSpec::default()
        };
        let (registry, langs) = build_languages(&spec).unwrap();
        let vocab = Vocab::new(spec.content_vocab, &registry);
        let mcfg = ModelConfig {
            d_model: 32,
            max_seq: 16,
            ..ModelConfig::for_vocab(vocab.size())
        };
        let base = BaseModel::init(mcfg, 2).unwrap();
        let task = registry.task("g1l0", "en").unwrap();

        // A fresh pool (B = 0 everywhere) on a nontrivial cipher: exact
        // match stays at chance level, and scoring twice gives identical
        // numbers.
        let test = crate::synth::gen_corpus(&spec, &langs["g1l0"], Direction::IntoEnglish, Split::Test)
            .unwrap();
        let fresh = base.init_bundle(
            "sep:g1l0-en",
            crate::adapters::AdapterDirection::IntoEnglish,
            vec!["g1l0".into()],
            4,
            8.0,
            7,
        );
        let pool = AdapterPool::new(
            crate::routing::PoolMode::Dat,
            BTreeMap::from([("sep:g1l0-en".to_string(), fresh)]),
        )
        .unwrap();
        let s1 = score_task(&pool, &base, &vocab, &registry, &test).unwrap();
        let s2 = score_task(&pool, &base, &vocab, &registry, &test).unwrap();
        assert_eq!(s1, s2);
        assert!(s1.exact_match < 0.05, "untrained exact match {}", s1.exact_match);

        // Train-split corpora are refused.
        let train = crate::synth::gen_corpus(&spec, &langs["g1l0"], Direction::IntoEnglish, Split::Train)
            .unwrap();
        assert!(matches!(
            score_task(&pool, &base, &vocab, &registry, &train),
            Err(Error::Validation(_))
        ));

        // Memorize one pair with full-parameter pretraining and present it
        // as the test set behind a fresh (identity) adapter: the decoder
        // reproduces it exactly, so every metric saturates at 1.
        use crate::training::{pretrain_base, CorpusMap, TrainConfig};
        let pair_corpus = Corpus {
            task: task.clone(),
            split: Split::Train,
            pairs: vec![train.pairs[0].clone()],
        };
        let mut corpora = CorpusMap::new();
        corpora.insert(task.clone(), pair_corpus);
        let tcfg = TrainConfig {
            lr_max: 1e-2,
            weight_decay: 0.0,
            seed: 3,
            ..TrainConfig::default()
        };
        let out = pretrain_base(&base.cfg, &vocab, &corpora, &tcfg, 400).unwrap();
        assert!(
            *out.curve.last().unwrap() < 0.05,
            "memorization loss {}",
            out.curve.last().unwrap()
        );
        let fresh = out.model.init_bundle(
            "sep:g1l0-en",
            crate::adapters::AdapterDirection::IntoEnglish,
            vec!["g1l0".into()],
            4,
            8.0,
            7,
        );
        let pool = AdapterPool::new(
            crate::routing::PoolMode::Dat,
            BTreeMap::from([("sep:g1l0-en".to_string(), fresh)]),
        )
        .unwrap();
        let memorized = Corpus {
            task,
            split: Split::Test,
            pairs: vec![train.pairs[0].clone()],
        };
        let s = score_task(&pool, &out.model, &vocab, &registry, &memorized).unwrap();
        assert_eq!(s.token_accuracy, 1.0);
        assert_eq!(s.exact_match, 1.0);
        assert_eq!(s.bleu, 1.0);
    }

    #[test]
    fn csv_rows_have_the_pinned_schema() {
        let row = ReportRow {
            run_id: "r1".into(),
            task: "de-en".into(),
            direction: Direction::IntoEnglish,
            group: 1,
            resource: Resource::High,
            strategy: "separate".into(),
            score: Score {
                token_accuracy: 0.5,
                exact_match: 0.25,
                bleu: 0.125,
            },
            delta: -0.5,
            verdict: Verdict::Synergy,
        };
        let csv = rows_to_csv(&[row]);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "run_id,task,direction,group,resource,strategy,token_acc,exact_match,bleu,delta,verdict"
        );
        assert_eq!(
            lines.next().unwrap(),
            "r1,de-en,xx-en,1,High,separate,0.500000,0.250000,0.125000,-0.500000,synergy"
        );
        assert!(lines.next().is_none());
    }
}
