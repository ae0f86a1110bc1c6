//! LoRA-style adapters: low-rank factor pairs per target matrix, bundles of
//! pairs with metadata, and the binary `.datb` bundle file format.
//!
//! An adapter contributes `dW = (alpha / r) * B * A` on top of a frozen base
//! matrix. `A` is `r x d_in`, `B` is `d_out x r`; freshly initialised bundles
//! have gaussian `A` and zero `B`, so they start as exact no-ops.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::Direction;
use crate::rng::Gaussian;
use crate::tensor::Tensor2;

pub const BUNDLE_MAGIC: &[u8; 4] = b"DATB";
pub const BUNDLE_VERSION: u32 = 1;

/// Std-dev of the gaussian init of `A` factors.
pub const LORA_INIT_STD: f64 = 0.02;

/// Direction served by a bundle. Mixed marks bundles trained on both
/// directions at once; those are never eligible for group-wise merging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdapterDirection {
    #[serde(rename = "xx-en")]
    IntoEnglish,
    #[serde(rename = "en-xx")]
    FromEnglish,
    #[serde(rename = "mixed")]
    Mixed,
}

impl From<Direction> for AdapterDirection {
    fn from(d: Direction) -> Self {
        match d {
            Direction::IntoEnglish => AdapterDirection::IntoEnglish,
            Direction::FromEnglish => AdapterDirection::FromEnglish,
        }
    }
}

impl std::fmt::Display for AdapterDirection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AdapterDirection::IntoEnglish => write!(f, "xx-en"),
            AdapterDirection::FromEnglish => write!(f, "en-xx"),
            AdapterDirection::Mixed => write!(f, "mixed"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterMeta {
    pub id: String,
    pub direction: AdapterDirection,
    /// Non-English languages covered, kept sorted.
    pub languages: Vec<String>,
    pub rank: u32,
    pub alpha: f32,
    /// FNV-1a over the base model's weight bytes; checked at application.
    pub base_fingerprint: u64,
}

/// One low-rank factor pair for a single target matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    /// `r x d_in`.
    pub a: Tensor2,
    /// `d_out x r`.
    pub b: Tensor2,
}

impl LoraPair {
    /// Zero-initialised pair (a no-op adapter even before training).
    pub fn zeros(d_out: usize, d_in: usize, rank: usize) -> LoraPair {
        LoraPair {
            a: Tensor2::zeros(rank, d_in),
            b: Tensor2::zeros(d_out, rank),
        }
    }

    /// Fresh pair: `A ~ N(0, 0.02)` drawn from `gauss`, `B = 0`.
    pub fn init(d_out: usize, d_in: usize, rank: usize, gauss: &mut Gaussian) -> LoraPair {
        let mut pair = LoraPair::zeros(d_out, d_in, rank);
        for v in pair.a.data.iter_mut() {
            *v = (gauss.next() * LORA_INIT_STD) as f32;
        }
        pair
    }

    pub fn rank(&self) -> usize {
        self.a.rows
    }

    pub fn d_in(&self) -> usize {
        self.a.cols
    }

    pub fn d_out(&self) -> usize {
        self.b.rows
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// `dW = (alpha / r) * B * A`, accumulated in f64.
pub fn lora_delta(pair: &LoraPair, alpha: f32) -> Tensor2 {
    let r = pair.rank();
    let scale = alpha as f64 / r as f64;
    let (d_out, d_in) = (pair.d_out(), pair.d_in());
    let mut delta = Tensor2::zeros(d_out, d_in);
    for i in 0..d_out {
        let brow = pair.b.row(i);
        let drow = delta.row_mut(i);
        for j in 0..d_in {
            let mut acc = 0.0f64;
            for k in 0..r {
                acc += brow[k] as f64 * pair.a.get(k, j) as f64;
            }
            drow[j] = (scale * acc) as f32;
        }
    }
    delta
}

/// `W + dW`; shapes must agree.
pub fn apply_adapter(weight: &Tensor2, pair: &LoraPair, alpha: f32) -> Result<Tensor2> {
    if pair.d_out() != weight.rows || pair.d_in() != weight.cols {
        return Err(Error::ShapeMismatch(format!(
            "adapter {}x{} on weight {}x{}",
            pair.d_out(),
            pair.d_in(),
            weight.rows,
            weight.cols
        )));
    }
    let delta = lora_delta(pair, alpha);
    let mut out = weight.clone();
    for (o, d) in out.data.iter_mut().zip(delta.data.iter()) {
        *o += *d;
    }
    Ok(out)
}

/// A set of factor pairs keyed by target matrix name, plus metadata.
/// Target iteration order is always lexicographic.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterBundle {
    pub meta: AdapterMeta,
    pub pairs: BTreeMap<String, LoraPair>,
}

impl AdapterBundle {
    pub fn param_count(&self) -> usize {
        self.pairs.values().map(|p| p.param_count()).sum()
    }

    /// Internal consistency: rank agreement and finite values.
    pub fn validate(&self) -> Result<()> {
        for (name, pair) in &self.pairs {
            if pair.rank() != self.meta.rank as usize || pair.b.cols != pair.rank() {
                return Err(Error::ShapeMismatch(format!(
                    "target {name}: rank {} disagrees with meta rank {}",
                    pair.rank(),
                    self.meta.rank
                )));
            }
            if pair.a.data.iter().chain(pair.b.data.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "target {name} contains non-finite values"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TargetHeader {
    target_name: String,
    a_rows: usize,
    a_cols: usize,
    b_rows: usize,
    b_cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleHeader {
    meta: AdapterMeta,
    targets: Vec<TargetHeader>,
}

fn write_f32s(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f32s(bytes: &[u8], count: usize, cursor: &mut usize) -> Result<Vec<f32>> {
    let need = count * 4;
    let end = *cursor + need;
    if end > bytes.len() {
        return Err(Error::Format("bundle payload truncated".into()));
    }
    let mut out = Vec::with_capacity(count);
    for chunk in bytes[*cursor..end].chunks_exact(4) {
        out.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    *cursor = end;
    Ok(out)
}

/// Serialise a bundle to the `.datb` byte layout. Pure function of the
/// bundle's contents, so identical bundles produce identical bytes.
pub fn bundle_to_bytes(bundle: &AdapterBundle) -> Vec<u8> {
    let targets: Vec<TargetHeader> = bundle
        .pairs
        .iter()
        .map(|(name, p)| TargetHeader {
            target_name: name.clone(),
            a_rows: p.a.rows,
            a_cols: p.a.cols,
            b_rows: p.b.rows,
            b_cols: p.b.cols,
        })
        .collect();
    let header = BundleHeader {
        meta: bundle.meta.clone(),
        targets,
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(BUNDLE_MAGIC);
    out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for pair in bundle.pairs.values() {
        write_f32s(&mut out, &pair.a.data);
        write_f32s(&mut out, &pair.b.data);
    }
    out
}

pub fn bundle_from_bytes(bytes: &[u8]) -> Result<AdapterBundle> {
    if bytes.len() < 16 || &bytes[0..4] != BUNDLE_MAGIC {
        return Err(Error::Format("not a DATB bundle".into()));
    }
    let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    if version != BUNDLE_VERSION {
        return Err(Error::Format(format!("unsupported bundle version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if 16 + header_len > bytes.len() {
        return Err(Error::Format("bundle header truncated".into()));
    }
    let header: BundleHeader = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| Error::Format(format!("bundle header: {e}")))?;
    let mut cursor = 16 + header_len;
    let mut pairs = BTreeMap::new();
    let mut last_name: Option<&str> = None;
    for t in &header.targets {
        if let Some(prev) = last_name {
            if prev >= t.target_name.as_str() {
                return Err(Error::Format("bundle targets are not sorted".into()));
            }
        }
        last_name = Some(&t.target_name);
        let a = Tensor2::from_vec(t.a_rows, t.a_cols, read_f32s(bytes, t.a_rows * t.a_cols, &mut cursor)?)?;
        let b = Tensor2::from_vec(t.b_rows, t.b_cols, read_f32s(bytes, t.b_rows * t.b_cols, &mut cursor)?)?;
        pairs.insert(t.target_name.clone(), LoraPair { a, b });
    }
    if cursor != bytes.len() {
        return Err(Error::Format("trailing bytes after bundle payload".into()));
    }
    Ok(AdapterBundle {
        meta: header.meta,
        pairs,
    })
}

pub fn save_bundle(bundle: &AdapterBundle, path: impl AsRef<Path>) -> Result<()> {
    let bytes = bundle_to_bytes(bundle);
    let mut file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(&path, e))
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<AdapterBundle> {
    let mut bytes = Vec::new();
    std::fs::File::open(&path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(&path, e))?;
    bundle_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_bundle() -> AdapterBundle {
        let mut gauss = Gaussian::new(5);
        let mut pairs = BTreeMap::new();
        let mut p = LoraPair::init(4, 6, 2, &mut gauss);
        for v in p.b.data.iter_mut() {
            *v = gauss.next() as f32;
        }
        pairs.insert("layer0.Wq".to_string(), p);
        pairs.insert("layer1.W1".to_string(), LoraPair::init(8, 4, 2, &mut gauss));
        AdapterBundle {
            meta: AdapterMeta {
                id: "sep:de-en".into(),
                direction: AdapterDirection::IntoEnglish,
                languages: vec!["de".into()],
                rank: 2,
                alpha: 4.0,
                base_fingerprint: 0xDEADBEEF12345678,
            },
            pairs,
        }
    }

    #[test]
    fn delta_matches_hand_computation() {
        // r=1: dW = alpha * b a^T (outer product) since alpha/r = alpha.
        let pair = LoraPair {
            a: Tensor2::from_vec(1, 2, vec![1.0, -2.0]).unwrap(),
            b: Tensor2::from_vec(3, 1, vec![0.5, 0.0, 2.0]).unwrap(),
        };
        let d = lora_delta(&pair, 3.0);
        assert_eq!(d.rows, 3);
        assert_eq!(d.cols, 2);
        assert_eq!(d.data, vec![1.5, -3.0, 0.0, 0.0, 6.0, -12.0]);
    }

    #[test]
    fn zero_b_is_exact_noop() {
        let mut gauss = Gaussian::new(9);
        let pair = LoraPair::init(5, 7, 3, &mut gauss);
        let mut w = Tensor2::zeros(5, 7);
        for v in w.data.iter_mut() {
            *v = gauss.next() as f32;
        }
        let out = apply_adapter(&w, &pair, 6.0).unwrap();
        assert_eq!(
            out.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            w.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn apply_checks_shapes() {
        let pair = LoraPair::zeros(4, 6, 2);
        let w = Tensor2::zeros(4, 5);
        assert!(matches!(
            apply_adapter(&w, &pair, 4.0),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let bundle = sample_bundle();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.datb");
        save_bundle(&bundle, &path).unwrap();
        let back = load_bundle(&path).unwrap();
        assert_eq!(back.meta, bundle.meta);
        for (name, pair) in &bundle.pairs {
            let q = &back.pairs[name];
            assert_eq!(
                pair.a.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                q.a.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
            assert_eq!(
                pair.b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                q.b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
        // Identical bundles produce identical bytes.
        assert_eq!(bundle_to_bytes(&bundle), bundle_to_bytes(&back));
    }

    #[test]
    fn malformed_files_are_rejected() {
        let bundle = sample_bundle();
        let bytes = bundle_to_bytes(&bundle);
        assert!(bundle_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(bundle_from_bytes(&wrong_magic).is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        assert!(bundle_from_bytes(&wrong_version).is_err());
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(bundle_from_bytes(&trailing).is_err());
    }

    #[test]
    fn validate_catches_rank_disagreement() {
        let mut bundle = sample_bundle();
        assert!(bundle.validate().is_ok());
        bundle.meta.rank = 3;
        assert!(bundle.validate().is_err());
    }
}
