//! Desk-scale laboratory for intra-modal misalignment in contrastive
//! dual-encoder vision-language models.
//!
//! The crate trains toy image/text encoders with CLIP-style objectives,
//! inverts features across modalities by optimizing encoder inputs, and
//! measures retrieval, zero-shot classification and modality-gap effects.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod error;
pub mod inversion;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod tensorfile;
pub mod train;

pub use error::{Error, Result};

/// Library version recorded in experiment manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
