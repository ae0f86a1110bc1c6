//! The toy base model: a pre-norm decoder-only transformer with causal
//! single-head attention, a ReLU MLP, learned positional embeddings, and an
//! untied output projection.
//!
//! Weights are stored f32; reductions accumulate in f64. A full-F64 working
//! mode exists for gradient testing. Adapters attach to the per-layer
//! matrices `{Wq, Wk, Wv, Wo, W1, W2}`; the base is frozen during adapter
//! training, so gradients exist only for the low-rank factors.

mod exact;
mod net;
mod optim;

pub use exact::ExactSum;
pub use net::{adapter_grads, base_grads, relu_signature, AdapterGradients, Prepared};
pub use optim::AdamState;

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterBundle, LoraPair};
use crate::error::{Error, Result};
use crate::rng::Gaussian;
use crate::tensor::Tensor2;

pub const CHECKPOINT_MAGIC: &[u8] = b"DATM-BASE";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// The six adapter target slots inside each layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TargetKind {
    Wq,
    Wk,
    Wv,
    Wo,
    W1,
    W2,
}

impl TargetKind {
    pub const ALL: [TargetKind; 6] = [
        TargetKind::Wq,
        TargetKind::Wk,
        TargetKind::Wv,
        TargetKind::Wo,
        TargetKind::W1,
        TargetKind::W2,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TargetKind::Wq => "Wq",
            TargetKind::Wk => "Wk",
            TargetKind::Wv => "Wv",
            TargetKind::Wo => "Wo",
            TargetKind::W1 => "W1",
            TargetKind::W2 => "W2",
        }
    }

    /// Shape of this slot for a given model width: (rows, cols).
    pub fn shape(&self, d: usize) -> (usize, usize) {
        match self {
            TargetKind::W1 => (4 * d, d),
            TargetKind::W2 => (d, 4 * d),
            _ => (d, d),
        }
    }
}

/// Name of an adapter target: `layer{l}.{kind}`.
pub fn target_name(layer: usize, kind: TargetKind) -> String {
    format!("layer{layer}.{}", kind.as_str())
}

/// Inverse of [`target_name`].
pub fn parse_target(name: &str) -> Option<(usize, TargetKind)> {
    let rest = name.strip_prefix("layer")?;
    let (layer, kind) = rest.split_once('.')?;
    let layer: usize = layer.parse().ok()?;
    let kind = match kind {
        "Wq" => TargetKind::Wq,
        "Wk" => TargetKind::Wk,
        "Wv" => TargetKind::Wv,
        "Wo" => TargetKind::Wo,
        "W1" => TargetKind::W1,
        "W2" => TargetKind::W2,
        _ => return None,
    };
    Some((layer, kind))
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
fn default_targets() -> BTreeSet<TargetKind> {
    TargetKind::ALL.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_n_layers")]
    pub n_layers: usize,
    #[serde(default = "default_max_seq")]
    pub max_seq: usize,
    #[serde(default = "default_targets")]
    pub lora_targets: BTreeSet<TargetKind>,
    #[serde(default)]
    pub precision: Precision,
}

impl ModelConfig {
    pub fn for_vocab(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: default_d_model(),
            n_layers: default_n_layers(),
            max_seq: default_max_seq(),
            lora_targets: default_targets(),
            precision: Precision::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::BadConfig(format!(
                "vocab_size {} is too small",
                self.vocab_size
            )));
        }
        if self.d_model == 0 || self.n_layers == 0 || self.max_seq < 2 {
            return Err(Error::BadConfig(
                "d_model, n_layers, max_seq must be positive (max_seq >= 2)".into(),
            ));
        }
        if self.lora_targets.is_empty() {
            return Err(Error::BadConfig("lora_targets is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Vec<f32>,
    pub bias: Vec<f32>,
}

impl LayerNormParams {
    fn fresh(d: usize) -> LayerNormParams {
        LayerNormParams {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1: LayerNormParams,
    pub wq: Tensor2,
    pub wk: Tensor2,
    pub wv: Tensor2,
    pub wo: Tensor2,
    pub ln2: LayerNormParams,
    pub w1: Tensor2,
    pub w2: Tensor2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel {
    pub cfg: ModelConfig,
    pub tok_emb: Tensor2,
    pub pos_emb: Tensor2,
    pub layers: Vec<LayerParams>,
    pub ln_f: LayerNormParams,
    pub w_out: Tensor2,
}

/// A model input: token ids plus the index of the first token that counts
/// toward the loss. For translation sequences that is the position right
/// after SEP; for plain language modelling it is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub loss_start: usize,
}

impl TokenSequence {
    pub fn lm(ids: Vec<u32>) -> TokenSequence {
        TokenSequence { ids, loss_start: 1 }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of predicted (loss-bearing) tokens.
    pub fn target_count(&self) -> usize {
        self.ids.len().saturating_sub(self.loss_start)
    }
}

impl BaseModel {
    /// Draw a fresh model: matrix weights `N(0, 0.02)` via Box-Muller over
    /// SplitMix64(seed) in canonical parameter order, layernorm gains 1 and
    /// biases 0.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<BaseModel> {
        cfg.validate()?;
        let mut gauss = Gaussian::new(seed);
        let mut draw = |rows: usize, cols: usize| -> Tensor2 {
            let mut t = Tensor2::zeros(rows, cols);
            for v in t.data.iter_mut() {
                *v = (gauss.next() * 0.02) as f32;
            }
            t
        };
        let d = cfg.d_model;
        let tok_emb = draw(cfg.vocab_size, d);
        let pos_emb = draw(cfg.max_seq, d);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                ln1: LayerNormParams::fresh(d),
                wq: draw(d, d),
                wk: draw(d, d),
                wv: draw(d, d),
                wo: draw(d, d),
                ln2: LayerNormParams::fresh(d),
                w1: draw(4 * d, d),
                w2: draw(d, 4 * d),
            })
            .collect();
        let ln_f = LayerNormParams::fresh(d);
        let w_out = draw(cfg.vocab_size, d);
        Ok(BaseModel {
            cfg,
            tok_emb,
            pos_emb,
            layers,
            ln_f,
            w_out,
        })
    }

    /// Canonical parameter list: (name, rows, cols), in storage order.
    pub fn param_specs(cfg: &ModelConfig) -> Vec<(String, usize, usize)> {
        let d = cfg.d_model;
        let mut specs = vec![
            ("tok_emb".to_string(), cfg.vocab_size, d),
            ("pos_emb".to_string(), cfg.max_seq, d),
        ];
        for l in 0..cfg.n_layers {
            specs.push((format!("layer{l}.ln1.gain"), 1, d));
            specs.push((format!("layer{l}.ln1.bias"), 1, d));
            specs.push((format!("layer{l}.Wq"), d, d));
            specs.push((format!("layer{l}.Wk"), d, d));
            specs.push((format!("layer{l}.Wv"), d, d));
            specs.push((format!("layer{l}.Wo"), d, d));
            specs.push((format!("layer{l}.ln2.gain"), 1, d));
            specs.push((format!("layer{l}.ln2.bias"), 1, d));
            specs.push((format!("layer{l}.W1"), 4 * d, d));
            specs.push((format!("layer{l}.W2"), d, 4 * d));
        }
        specs.push(("ln_f.gain".to_string(), 1, d));
        specs.push(("ln_f.bias".to_string(), 1, d));
        specs.push(("w_out".to_string(), cfg.vocab_size, d));
        specs
    }

    /// Parameter slices in canonical order.
    pub fn param_slices(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![&self.tok_emb.data, &self.pos_emb.data];
        for layer in &self.layers {
            out.push(&layer.ln1.gain);
            out.push(&layer.ln1.bias);
            out.push(&layer.wq.data);
            out.push(&layer.wk.data);
            out.push(&layer.wv.data);
            out.push(&layer.wo.data);
            out.push(&layer.ln2.gain);
            out.push(&layer.ln2.bias);
            out.push(&layer.w1.data);
            out.push(&layer.w2.data);
        }
        out.push(&self.ln_f.gain);
        out.push(&self.ln_f.bias);
        out.push(&self.w_out.data);
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = vec![&mut self.tok_emb.data, &mut self.pos_emb.data];
        for layer in &mut self.layers {
            out.push(&mut layer.ln1.gain);
            out.push(&mut layer.ln1.bias);
            out.push(&mut layer.wq.data);
            out.push(&mut layer.wk.data);
            out.push(&mut layer.wv.data);
            out.push(&mut layer.wo.data);
            out.push(&mut layer.ln2.gain);
            out.push(&mut layer.ln2.bias);
            out.push(&mut layer.w1.data);
            out.push(&mut layer.w2.data);
        }
        out.push(&mut self.ln_f.gain);
        out.push(&mut self.ln_f.bias);
        out.push(&mut self.w_out.data);
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// FNV-1a over the little-endian bytes of every parameter in canonical
    /// order. Adapters record this at training time and refuse to apply to
    /// a base with a different fingerprint.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for slice in self.param_slices() {
            for v in slice {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    /// Matrix for an adapter target slot.
    pub fn target_matrix(&self, layer: usize, kind: TargetKind) -> &Tensor2 {
        let l = &self.layers[layer];
        match kind {
            TargetKind::Wq => &l.wq,
            TargetKind::Wk => &l.wk,
            TargetKind::Wv => &l.wv,
            TargetKind::Wo => &l.wo,
            TargetKind::W1 => &l.w1,
            TargetKind::W2 => &l.w2,
        }
    }

    /// Check that a bundle structurally matches this model: known targets,
    /// matching shapes and rank, matching base fingerprint.
    pub fn check_bundle(&self, bundle: &AdapterBundle) -> Result<()> {
        bundle.validate()?;
        let fp = self.fingerprint();
        if bundle.meta.base_fingerprint != fp {
            return Err(Error::FingerprintMismatch {
                bundle: bundle.meta.base_fingerprint,
                model: fp,
            });
        }
        for (name, pair) in &bundle.pairs {
            let (layer, kind) = parse_target(name).ok_or_else(|| {
                Error::Validation(format!("unknown adapter target '{name}'"))
            })?;
            if layer >= self.cfg.n_layers {
                return Err(Error::Validation(format!(
                    "adapter target '{name}' exceeds n_layers {}",
                    self.cfg.n_layers
                )));
            }
            let (rows, cols) = kind.shape(self.cfg.d_model);
            if pair.d_out() != rows || pair.d_in() != cols {
                return Err(Error::ShapeMismatch(format!(
                    "target '{name}': adapter {}x{} on weight {rows}x{cols}",
                    pair.d_out(),
                    pair.d_in()
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes();
        let mut file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        file.write_all(&bytes).map_err(|e| Error::io(&path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<BaseModel> {
        let mut bytes = Vec::new();
        std::fs::File::open(&path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(&path, e))?;
        BaseModel::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let specs = BaseModel::param_specs(&self.cfg);
        let header = CheckpointHeader {
            config: self.cfg.clone(),
            matrices: specs
                .iter()
                .map(|(name, rows, cols)| MatrixHeader {
                    name: name.clone(),
                    rows: *rows,
                    cols: *cols,
                })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for slice in self.param_slices() {
            for v in slice {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<BaseModel> {
        let m = CHECKPOINT_MAGIC.len();
        if bytes.len() < m + 12 || &bytes[..m] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a DATM-BASE checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[m..m + 4].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let header_len =
            u64::from_le_bytes(bytes[m + 4..m + 12].try_into().unwrap()) as usize;
        let header_start = m + 12;
        if header_start + header_len > bytes.len() {
            return Err(Error::Format("checkpoint header truncated".into()));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[header_start..header_start + header_len])
                .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        header.config.validate()?;
        let expected = BaseModel::param_specs(&header.config);
        if expected.len() != header.matrices.len()
            || expected.iter().zip(header.matrices.iter()).any(|(e, h)| {
                e.0 != h.name || e.1 != h.rows || e.2 != h.cols
            })
        {
            return Err(Error::Format(
                "checkpoint matrix list disagrees with config".into(),
            ));
        }
        let mut cursor = header_start + header_len;
        let mut read_mat = |rows: usize, cols: usize| -> Result<Vec<f32>> {
            let count = rows * cols;
            let end = cursor + count * 4;
            if end > bytes.len() {
                return Err(Error::Format("checkpoint payload truncated".into()));
            }
            let mut out = Vec::with_capacity(count);
            for chunk in bytes[cursor..end].chunks_exact(4) {
                out.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
            }
            cursor = end;
            Ok(out)
        };
        let cfg = header.config;
        let d = cfg.d_model;
        let tok_emb = Tensor2::from_vec(cfg.vocab_size, d, read_mat(cfg.vocab_size, d)?)?;
        let pos_emb = Tensor2::from_vec(cfg.max_seq, d, read_mat(cfg.max_seq, d)?)?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            layers.push(LayerParams {
                ln1: LayerNormParams {
                    gain: read_mat(1, d)?,
                    bias: read_mat(1, d)?,
                },
                wq: Tensor2::from_vec(d, d, read_mat(d, d)?)?,
                wk: Tensor2::from_vec(d, d, read_mat(d, d)?)?,
                wv: Tensor2::from_vec(d, d, read_mat(d, d)?)?,
                wo: Tensor2::from_vec(d, d, read_mat(d, d)?)?,
                ln2: LayerNormParams {
                    gain: read_mat(1, d)?,
                    bias: read_mat(1, d)?,
                },
                w1: Tensor2::from_vec(4 * d, d, read_mat(4 * d, d)?)?,
                w2: Tensor2::from_vec(d, 4 * d, read_mat(d, 4 * d)?)?,
            });
        }
        let ln_f = LayerNormParams {
            gain: read_mat(1, d)?,
            bias: read_mat(1, d)?,
        };
        let w_out = Tensor2::from_vec(cfg.vocab_size, d, read_mat(cfg.vocab_size, d)?)?;
        if cursor != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint payload".into()));
        }
        Ok(BaseModel {
            cfg,
            tok_emb,
            pos_emb,
            layers,
            ln_f,
            w_out,
        })
    }

    /// Fresh zero-initialised adapter bundle for this model's target set.
    /// `A ~ N(0, 0.02)` from the given seed, `B = 0`.
    pub fn init_bundle(
        &self,
        id: &str,
        direction: crate::adapters::AdapterDirection,
        languages: Vec<String>,
        rank: u32,
        alpha: f32,
        seed: u64,
    ) -> AdapterBundle {
        let mut gauss = Gaussian::new(seed);
        let mut pairs = std::collections::BTreeMap::new();
        // Draw in deterministic (layer, kind) order, which also matches the
        // lexicographic bundle order for single-digit layer counts.
        for l in 0..self.cfg.n_layers {
            for kind in TargetKind::ALL {
                if !self.cfg.lora_targets.contains(&kind) {
                    continue;
                }
                let (rows, cols) = kind.shape(self.cfg.d_model);
                let pair = LoraPair::init(rows, cols, rank as usize, &mut gauss);
                pairs.insert(target_name(l, kind), pair);
            }
        }
        let mut languages = languages;
        languages.sort();
        languages.dedup();
        AdapterBundle {
            meta: crate::adapters::AdapterMeta {
                id: id.to_string(),
                direction,
                languages,
                rank,
                alpha,
                base_fingerprint: self.fingerprint(),
            },
            pairs,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MatrixHeader {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    matrices: Vec<MatrixHeader>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            d_model: 8,
            n_layers: 2,
            max_seq: 12,
            lora_targets: default_targets(),
            precision: Precision::F32,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = BaseModel::init(small_cfg(), 3).unwrap();
        let b = BaseModel::init(small_cfg(), 3).unwrap();
        let c = BaseModel::init(small_cfg(), 4).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model = BaseModel::init(small_cfg(), 9).unwrap();
        let bytes = model.to_bytes();
        let back = BaseModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.fingerprint(), model.fingerprint());
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let model = BaseModel::init(small_cfg(), 9).unwrap();
        let bytes = model.to_bytes();
        assert!(BaseModel::from_bytes(&bytes[..bytes.len() - 2]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(BaseModel::from_bytes(&bad).is_err());
        let mut trailing = bytes;
        trailing.extend_from_slice(&[0, 0, 0, 0]);
        assert!(BaseModel::from_bytes(&trailing).is_err());
    }

    #[test]
    fn fingerprint_changes_with_any_weight() {
        let model = BaseModel::init(small_cfg(), 1).unwrap();
        let fp = model.fingerprint();
        let mut bumped = model.clone();
        bumped.layers[1].w2.data[5] += 1e-3;
        assert_ne!(bumped.fingerprint(), fp);
    }

    #[test]
    fn bundle_check_catches_mismatches() {
        let model = BaseModel::init(small_cfg(), 1).unwrap();
        let bundle = model.init_bundle(
            "sep:de-en",
            crate::adapters::AdapterDirection::IntoEnglish,
            vec!["de".into()],
            2,
            4.0,
            7,
        );
        assert!(model.check_bundle(&bundle).is_ok());
        assert_eq!(bundle.pairs.len(), 12);

        let other = BaseModel::init(small_cfg(), 2).unwrap();
        assert!(matches!(
            other.check_bundle(&bundle),
            Err(Error::FingerprintMismatch { .. })
        ));

        let mut renamed = bundle.clone();
        let pair = renamed.pairs.remove("layer0.Wq").unwrap();
        renamed.pairs.insert("layer7.Wq".into(), pair);
        assert!(model.check_bundle(&renamed).is_err());
    }

    #[test]
    fn target_name_round_trip() {
        for l in 0..3 {
            for kind in TargetKind::ALL {
                let name = target_name(l, kind);
                assert_eq!(parse_target(&name), Some((l, kind)));
            }
        }
        assert_eq!(parse_target("blah"), None);
        assert_eq!(parse_target("layerx.Wq"), None);
        assert_eq!(parse_target("layer0.Wz"), None);
    }

    #[test]
    fn config_serde_defaults() {
        let cfg: ModelConfig = serde_json::from_str(r#"{"vocab_size": 79}"#).unwrap();
        assert_eq!(cfg.d_model, 64);
        assert_eq!(cfg.n_layers, 2);
        assert_eq!(cfg.max_seq, 48);
        assert_eq!(cfg.precision, Precision::F32);
        assert_eq!(cfg.lora_targets.len(), 6);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"vocab_size": 1, "oops": 3}"#).is_err());
    }
}
