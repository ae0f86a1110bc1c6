//! Task-vector merging: trim / sign election / disjoint mean (TIES), random
//! drop-and-rescale (DARE), and group-wise merging of adapter bundles.
//!
//! Bundles are flattened to task vectors (targets in lexicographic order,
//! each target's `A` entries row-major, then its `B` entries), merged
//! entrywise, and unflattened. Reductions run in f64 so that degenerate
//! cases (a single vector, identical vectors) return their input bit-exactly.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterBundle, AdapterDirection, AdapterMeta, LoraPair};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Factor {
    A,
    B,
}

/// Shape record for one factor tensor inside a flattened vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutField {
    pub target: String,
    pub factor: Factor,
    pub rows: usize,
    pub cols: usize,
}

/// A flattened view of one adapter's trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub entries: Vec<f32>,
    pub layout: Vec<LayoutField>,
}

impl TaskVector {
    /// Wrap a bare entry list; used by numeric tests and the merge kernels.
    pub fn raw(entries: Vec<f32>) -> TaskVector {
        let layout = vec![LayoutField {
            target: "raw".to_string(),
            factor: Factor::A,
            rows: 1,
            cols: entries.len(),
        }];
        TaskVector { entries, layout }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n: usize = self.layout.iter().map(|f| f.rows * f.cols).sum();
        if n != self.entries.len() {
            return Err(Error::ShapeMismatch(format!(
                "layout covers {n} entries, vector has {}",
                self.entries.len()
            )));
        }
        if self.entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("task vector has non-finite entries".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MergeMethod {
    Average,
    Ties,
    DareTies,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeConfig {
    #[serde(default = "default_method")]
    pub method: MergeMethod,
    /// TIES trim density k: keep the ceil(k*n) largest-magnitude entries.
    #[serde(default = "default_density")]
    pub density: f32,
    /// DARE drop probability p.
    #[serde(default = "default_drop_p")]
    pub drop_p: f32,
    /// Scale applied to the merged vector.
    #[serde(default = "default_lambda")]
    pub lambda: f32,
    #[serde(default)]
    pub seed: u64,
}

fn default_method() -> MergeMethod {
    MergeMethod::Ties
}
fn default_density() -> f32 {
    0.2
}
fn default_drop_p() -> f32 {
    0.5
}
fn default_lambda() -> f32 {
    1.0
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            method: default_method(),
            density: default_density(),
            drop_p: default_drop_p(),
            lambda: default_lambda(),
            seed: 0,
        }
    }
}

/// Number of entries kept by trim: ceil(k*n), with products within
/// 1e-6*n of an integer snapped to it so that decimal densities entered
/// as f32 literals (0.2 * 10 -> 2, not 3) behave as written.
pub fn trim_keep_count(k: f32, n: usize) -> usize {
    let prod = k as f64 * n as f64;
    let nearest = prod.round();
    let m = if (prod - nearest).abs() <= 1e-6 * (n.max(1) as f64) {
        nearest as usize
    } else {
        prod.ceil() as usize
    };
    m.min(n)
}

fn check_density(k: f32) -> Result<()> {
    if !k.is_finite() || k <= 0.0 || k > 1.0 {
        return Err(Error::BadDensity(k));
    }
    Ok(())
}

/// Zero all but the ceil(k*n) largest-magnitude entries. Magnitude ties
/// keep the lower index.
pub fn trim(v: &TaskVector, k: f32) -> Result<TaskVector> {
    check_density(k)?;
    v.validate()?;
    let n = v.len();
    let m = trim_keep_count(k, n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| {
        let (mi, mj) = (v.entries[i].abs(), v.entries[j].abs());
        mj.partial_cmp(&mi).unwrap().then(i.cmp(&j))
    });
    let mut out = vec![0.0f32; n];
    for &i in idx.iter().take(m) {
        out[i] = v.entries[i];
    }
    Ok(TaskVector {
        entries: out,
        layout: v.layout.clone(),
    })
}

fn check_aligned(vs: &[TaskVector]) -> Result<()> {
    let first = vs
        .first()
        .ok_or_else(|| Error::EmptyInput("merge of zero task vectors".into()))?;
    for v in vs {
        if v.layout != first.layout {
            return Err(Error::LayoutMismatch);
        }
        if v.len() != first.len() {
            return Err(Error::LengthMismatch(format!(
                "task vectors of length {} and {}",
                first.len(),
                v.len()
            )));
        }
        v.validate()?;
    }
    Ok(())
}

/// Elected sign per coordinate: sign of the sum across vectors, with an
/// exact zero sum electing positive.
pub fn elect_signs(vs: &[TaskVector]) -> Result<Vec<f32>> {
    check_aligned(vs)?;
    let n = vs[0].len();
    let mut gamma = vec![1.0f32; n];
    for j in 0..n {
        let sum: f64 = vs.iter().map(|v| v.entries[j] as f64).sum();
        gamma[j] = if sum < 0.0 { -1.0 } else { 1.0 };
    }
    Ok(gamma)
}

/// Mean of the nonzero entries whose sign matches the elected one;
/// coordinates with no such entry merge to zero.
pub fn disjoint_merge(vs: &[TaskVector], gamma: &[f32]) -> Result<TaskVector> {
    check_aligned(vs)?;
    let n = vs[0].len();
    if gamma.len() != n {
        return Err(Error::LengthMismatch(format!(
            "sign vector of length {} for vectors of length {n}",
            gamma.len()
        )));
    }
    let mut out = vec![0.0f32; n];
    for j in 0..n {
        let mut sum = 0.0f64;
        let mut count = 0u32;
        for v in vs {
            let e = v.entries[j];
            if e != 0.0 && ((e > 0.0) == (gamma[j] > 0.0)) {
                sum += e as f64;
                count += 1;
            }
        }
        if count > 0 {
            out[j] = (sum / count as f64) as f32;
        }
    }
    Ok(TaskVector {
        entries: out,
        layout: vs[0].layout.clone(),
    })
}

/// DARE: per-entry Bernoulli drop with rescale by 1/(1-p). Entry j uses the
/// j-th draw of SplitMix64(seed), so the output is a pure function of
/// (v, p, seed).
pub fn dare(v: &TaskVector, p: f32, seed: u64) -> Result<TaskVector> {
    if !p.is_finite() || !(0.0..1.0).contains(&p) {
        return Err(Error::BadProbability(p));
    }
    v.validate()?;
    let mut rng = SplitMix64::new(seed);
    let scale = 1.0 / (1.0 - p as f64);
    let mut out = Vec::with_capacity(v.len());
    for &e in &v.entries {
        let u = rng.next_f64();
        if u < p as f64 {
            out.push(0.0);
        } else {
            out.push((e as f64 * scale) as f32);
        }
    }
    Ok(TaskVector {
        entries: out,
        layout: v.layout.clone(),
    })
}

fn scale_vector(v: TaskVector, lambda: f32) -> TaskVector {
    if lambda == 1.0 {
        return v;
    }
    TaskVector {
        entries: v.entries.iter().map(|&e| (e as f64 * lambda as f64) as f32).collect(),
        layout: v.layout,
    }
}

/// Merge task vectors under the configured method.
pub fn merge(vs: &[TaskVector], cfg: &MergeConfig) -> Result<TaskVector> {
    check_aligned(vs)?;
    let merged = match cfg.method {
        MergeMethod::Average => {
            let n = vs[0].len();
            let mut out = vec![0.0f32; n];
            for (j, slot) in out.iter_mut().enumerate() {
                let sum: f64 = vs.iter().map(|v| v.entries[j] as f64).sum();
                *slot = (sum / vs.len() as f64) as f32;
            }
            TaskVector {
                entries: out,
                layout: vs[0].layout.clone(),
            }
        }
        MergeMethod::Ties => ties_pipeline(vs, cfg.density)?,
        MergeMethod::DareTies => {
            let mut seeds = SplitMix64::new(cfg.seed);
            let dared: Vec<TaskVector> = vs
                .iter()
                .map(|v| dare(v, cfg.drop_p, seeds.next_u64()))
                .collect::<Result<_>>()?;
            ties_pipeline(&dared, cfg.density)?
        }
    };
    Ok(scale_vector(merged, cfg.lambda))
}

fn ties_pipeline(vs: &[TaskVector], density: f32) -> Result<TaskVector> {
    let trimmed: Vec<TaskVector> = vs.iter().map(|v| trim(v, density)).collect::<Result<_>>()?;
    let gamma = elect_signs(&trimmed)?;
    disjoint_merge(&trimmed, &gamma)
}

/// Flatten a bundle's factors into one task vector. Targets go in
/// lexicographic order; within a target, `A` precedes `B`, row-major.
pub fn flatten_bundle(bundle: &AdapterBundle) -> TaskVector {
    let mut entries = Vec::with_capacity(bundle.param_count());
    let mut layout = Vec::with_capacity(bundle.pairs.len() * 2);
    for (name, pair) in &bundle.pairs {
        entries.extend_from_slice(&pair.a.data);
        layout.push(LayoutField {
            target: name.clone(),
            factor: Factor::A,
            rows: pair.a.rows,
            cols: pair.a.cols,
        });
        entries.extend_from_slice(&pair.b.data);
        layout.push(LayoutField {
            target: name.clone(),
            factor: Factor::B,
            rows: pair.b.rows,
            cols: pair.b.cols,
        });
    }
    TaskVector { entries, layout }
}

/// Rebuild a bundle from a flattened vector and fresh metadata.
pub fn unflatten_bundle(v: &TaskVector, meta: AdapterMeta) -> Result<AdapterBundle> {
    v.validate()?;
    let mut pairs: std::collections::BTreeMap<String, LoraPair> = Default::default();
    let mut offset = 0;
    let mut i = 0;
    while i < v.layout.len() {
        let fa = &v.layout[i];
        let fb = v
            .layout
            .get(i + 1)
            .ok_or_else(|| Error::ShapeMismatch("layout missing B factor".into()))?;
        if fa.factor != Factor::A || fb.factor != Factor::B || fa.target != fb.target {
            return Err(Error::ShapeMismatch(format!(
                "layout fields for target {} are not an A/B pair",
                fa.target
            )));
        }
        let a_len = fa.rows * fa.cols;
        let b_len = fb.rows * fb.cols;
        let a = Tensor2::from_vec(fa.rows, fa.cols, v.entries[offset..offset + a_len].to_vec())?;
        offset += a_len;
        let b = Tensor2::from_vec(fb.rows, fb.cols, v.entries[offset..offset + b_len].to_vec())?;
        offset += b_len;
        pairs.insert(fa.target.clone(), LoraPair { a, b });
        i += 2;
    }
    let bundle = AdapterBundle { meta, pairs };
    bundle.validate()?;
    Ok(bundle)
}

/// Merge one group's into-English bundles into a single bundle with id
/// `mrg:<group>:xx-en`. Refuses from-English or mixed bundles and any
/// disagreement in rank, alpha, targets, or base fingerprint.
pub fn merge_group(bundles: &[&AdapterBundle], cfg: &MergeConfig, group: u8) -> Result<AdapterBundle> {
    if bundles.is_empty() {
        return Err(Error::EmptyInput("merge_group over zero bundles".into()));
    }
    let first = bundles[0];
    let mut languages: BTreeSet<String> = BTreeSet::new();
    for b in bundles {
        if b.meta.direction != AdapterDirection::IntoEnglish {
            return Err(Error::DirectionError(format!(
                "bundle {} is {}; only xx-en bundles merge",
                b.meta.id, b.meta.direction
            )));
        }
        if b.meta.rank != first.meta.rank || b.meta.alpha != first.meta.alpha {
            return Err(Error::IncompatibleBundles(format!(
                "bundle {} has rank/alpha {}/{}, expected {}/{}",
                b.meta.id, b.meta.rank, b.meta.alpha, first.meta.rank, first.meta.alpha
            )));
        }
        if b.meta.base_fingerprint != first.meta.base_fingerprint {
            return Err(Error::IncompatibleBundles(format!(
                "bundle {} was trained on a different base", b.meta.id
            )));
        }
        languages.extend(b.meta.languages.iter().cloned());
    }
    let vectors: Vec<TaskVector> = bundles.iter().map(|b| flatten_bundle(b)).collect();
    for v in &vectors[1..] {
        if v.layout != vectors[0].layout {
            return Err(Error::IncompatibleBundles(
                "bundles disagree on target names or shapes".into(),
            ));
        }
    }
    let merged = merge(&vectors, cfg)?;
    unflatten_bundle(
        &merged,
        AdapterMeta {
            id: format!("mrg:{group}:xx-en"),
            direction: AdapterDirection::IntoEnglish,
            languages: languages.into_iter().collect(),
            rank: first.meta.rank,
            alpha: first.meta.alpha,
            base_fingerprint: first.meta.base_fingerprint,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tv(entries: &[f32]) -> TaskVector {
        TaskVector::raw(entries.to_vec())
    }

    #[test]
    fn trim_keeps_largest_with_index_ties() {
        let v = tv(&[3.0, -5.0, 0.5, -0.5, 2.0]);
        let t = trim(&v, 0.4).unwrap();
        assert_eq!(t.entries, vec![3.0, -5.0, 0.0, 0.0, 0.0]);
        // |0.5| tie: lower index wins the last slot.
        let t = trim(&v, 0.8).unwrap();
        assert_eq!(t.entries, vec![3.0, -5.0, 0.5, 0.0, 2.0]);
    }

    #[test]
    fn trim_count_follows_decimal_intent() {
        assert_eq!(trim_keep_count(0.2, 10), 2);
        assert_eq!(trim_keep_count(0.3, 10), 3);
        assert_eq!(trim_keep_count(1.0, 7), 7);
        assert_eq!(trim_keep_count(0.25, 10), 3); // 2.5 -> ceil
        assert_eq!(trim_keep_count(0.5, 3), 2); // 1.5 -> ceil
    }

    #[test]
    fn trim_rejects_bad_density() {
        let v = tv(&[1.0]);
        assert!(matches!(trim(&v, 0.0), Err(Error::BadDensity(_))));
        assert!(matches!(trim(&v, 1.5), Err(Error::BadDensity(_))));
        assert!(matches!(trim(&v, -0.1), Err(Error::BadDensity(_))));
    }

    #[test]
    fn elect_zero_sum_is_positive() {
        let vs = [tv(&[1.0, -1.0, 0.0]), tv(&[-1.0, -1.0, 0.0])];
        let gamma = elect_signs(&vs).unwrap();
        assert_eq!(gamma, vec![1.0, -1.0, 1.0]);
    }

    #[test]
    fn spec_worked_example() {
        // vectors [2, 0] and [-1, 0], Ties, k = 1: elect +, j0 mean {2},
        // j1 all zero -> 0.
        let vs = [tv(&[2.0, 0.0]), tv(&[-1.0, 0.0])];
        let cfg = MergeConfig {
            method: MergeMethod::Ties,
            density: 1.0,
            ..Default::default()
        };
        let out = merge(&vs, &cfg).unwrap();
        assert_eq!(out.entries, vec![2.0, 0.0]);
    }

    #[test]
    fn singleton_and_identical_inputs_are_bit_exact() {
        let mut rng = SplitMix64::new(77);
        let entries: Vec<f32> = (0..257).map(|_| (rng.next_f64() * 4.0 - 2.0) as f32).collect();
        let v = tv(&entries);
        let cfg = MergeConfig {
            method: MergeMethod::Ties,
            density: 1.0,
            lambda: 1.0,
            ..Default::default()
        };
        let single = merge(std::slice::from_ref(&v), &cfg).unwrap();
        assert_eq!(bits(&single.entries), bits(&entries));
        let triple = merge(&[v.clone(), v.clone(), v.clone()], &cfg).unwrap();
        assert_eq!(bits(&triple.entries), bits(&entries));
        let avg = merge(
            &[v.clone(), v],
            &MergeConfig {
                method: MergeMethod::Average,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(bits(&avg.entries), bits(&entries));
    }

    fn bits(v: &[f32]) -> Vec<u32> {
        v.iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn dare_zero_p_is_identity() {
        let v = tv(&[1.0, -2.0, 3.5, 0.0, -0.25]);
        for seed in [0u64, 1, 99, u64::MAX] {
            let out = dare(&v, 0.0, seed).unwrap();
            assert_eq!(bits(&out.entries), bits(&v.entries));
        }
    }

    #[test]
    fn dare_rejects_bad_probability() {
        let v = tv(&[1.0]);
        assert!(matches!(dare(&v, 1.0, 0), Err(Error::BadProbability(_))));
        assert!(matches!(dare(&v, -0.1, 0), Err(Error::BadProbability(_))));
    }

    #[test]
    fn dare_zeroes_or_rescales() {
        let v = tv(&[1.0, -2.0, 3.0, 4.0, -5.0, 6.0, 7.0, -8.0]);
        let out = dare(&v, 0.5, 123).unwrap();
        for (o, i) in out.entries.iter().zip(v.entries.iter()) {
            assert!(*o == 0.0 || (*o - i * 2.0).abs() < 1e-6, "o={o} i={i}");
        }
        // deterministic per seed
        let again = dare(&v, 0.5, 123).unwrap();
        assert_eq!(bits(&out.entries), bits(&again.entries));
    }

    #[test]
    fn merged_support_is_contained_in_trimmed_union() {
        let mut rng = SplitMix64::new(5);
        let vs: Vec<TaskVector> = (0..4)
            .map(|_| tv(&(0..64).map(|_| (rng.next_f64() * 2.0 - 1.0) as f32).collect::<Vec<_>>()))
            .collect();
        let k = 0.25;
        let out = merge(
            &vs,
            &MergeConfig {
                method: MergeMethod::Ties,
                density: k,
                ..Default::default()
            },
        )
        .unwrap();
        let trimmed: Vec<TaskVector> = vs.iter().map(|v| trim(v, k).unwrap()).collect();
        for j in 0..out.len() {
            if out.entries[j] != 0.0 {
                assert!(trimmed.iter().any(|t| t.entries[j] != 0.0));
            }
        }
    }

    #[test]
    fn scale_equivariance_at_powers_of_two() {
        let mut rng = SplitMix64::new(31);
        let vs: Vec<TaskVector> = (0..3)
            .map(|_| tv(&(0..40).map(|_| (rng.next_f64() * 2.0 - 1.0) as f32).collect::<Vec<_>>()))
            .collect();
        let cfg = MergeConfig {
            method: MergeMethod::Ties,
            density: 0.5,
            ..Default::default()
        };
        let base = merge(&vs, &cfg).unwrap();
        let scaled_in: Vec<TaskVector> = vs
            .iter()
            .map(|v| tv(&v.entries.iter().map(|e| e * 4.0).collect::<Vec<_>>()))
            .collect();
        let scaled_out = merge(&scaled_in, &cfg).unwrap();
        for j in 0..base.len() {
            assert_eq!(scaled_out.entries[j].to_bits(), (base.entries[j] * 4.0).to_bits());
        }
    }

    #[test]
    fn merge_rejects_misaligned_inputs() {
        let cfg = MergeConfig::default();
        assert!(matches!(merge(&[], &cfg), Err(Error::EmptyInput(_))));
        let a = tv(&[1.0, 2.0]);
        let b = tv(&[1.0, 2.0, 3.0]);
        assert!(matches!(merge(&[a, b], &cfg), Err(Error::LayoutMismatch)));
    }

    fn mini_bundle(id: &str, direction: AdapterDirection, lang: &str, seed: u64) -> AdapterBundle {
        let mut gauss = crate::rng::Gaussian::new(seed);
        let mut pairs = std::collections::BTreeMap::new();
        for name in ["layer0.Wq", "layer0.W1"] {
            let mut p = LoraPair::init(4, 4, 2, &mut gauss);
            for v in p.b.data.iter_mut() {
                *v = gauss.next() as f32 * 0.1;
            }
            pairs.insert(name.to_string(), p);
        }
        AdapterBundle {
            meta: AdapterMeta {
                id: id.to_string(),
                direction,
                languages: vec![lang.to_string()],
                rank: 2,
                alpha: 4.0,
                base_fingerprint: 42,
            },
            pairs,
        }
    }

    #[test]
    fn flatten_round_trip() {
        let b = mini_bundle("sep:de-en", AdapterDirection::IntoEnglish, "de", 3);
        let v = flatten_bundle(&b);
        assert_eq!(v.len(), b.param_count());
        let back = unflatten_bundle(&v, b.meta.clone()).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn merge_group_unions_languages_and_checks_direction() {
        let b1 = mini_bundle("sep:de-en", AdapterDirection::IntoEnglish, "de", 1);
        let b2 = mini_bundle("sep:nl-en", AdapterDirection::IntoEnglish, "nl", 2);
        let cfg = MergeConfig::default();
        let merged = merge_group(&[&b1, &b2], &cfg, 1).unwrap();
        assert_eq!(merged.meta.id, "mrg:1:xx-en");
        assert_eq!(merged.meta.languages, vec!["de".to_string(), "nl".to_string()]);
        assert_eq!(merged.meta.direction, AdapterDirection::IntoEnglish);

        let from_en = mini_bundle("grp:1:en-xx", AdapterDirection::FromEnglish, "de", 3);
        assert!(matches!(
            merge_group(&[&b1, &from_en], &cfg, 1),
            Err(Error::DirectionError(_))
        ));

        let mut other_base = mini_bundle("sep:sv-en", AdapterDirection::IntoEnglish, "sv", 4);
        other_base.meta.base_fingerprint = 43;
        assert!(matches!(
            merge_group(&[&b1, &other_base], &cfg, 1),
            Err(Error::IncompatibleBundles(_))
        ));
    }
}
