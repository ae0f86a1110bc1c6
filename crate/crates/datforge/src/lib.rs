//! Direction-aware adapter pools for multilingual translation, at desk scale.
//!
//! The crate trains LoRA-style adapters on a tiny autoregressive transformer
//! over synthetic translation ciphers, routes requests by direction
//! (one adapter per source language into English, one adapter per language
//! group out of English), and compresses the into-English side by merging
//! each group's adapters with TIES / DARE-TIES. Everything is seeded and
//! reproducible: same inputs, same bytes out.
//!
//! Module map:
//! - [`registry`]: language metadata, groups, translation tasks
//! - [`tensor`]: flat row-major f32 matrices
//! - [`adapters`]: LoRA pairs, bundles, the on-disk bundle format
//! - [`merging`]: task vectors, trim / sign election / disjoint merge, DARE
//! - [`toymodel`]: the tiny transformer, loss, gradients, Adam, decoding
//! - [`synth`]: synthetic language family and corpus generation
//! - [`training`]: pretraining, adapter training, the three strategies
//! - [`routing`]: adapter pools, routing laws, translate
//! - [`evaluation`]: token accuracy, BLEU, delta records, asymmetry reports
//! - [`experiments`]: the desk experiments and their report files

pub mod adapters;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod merging;
pub mod registry;
pub mod rng;
pub mod routing;
pub mod synth;
pub mod tensor;
pub mod toymodel;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
