//! Fine-grained patch-to-concept alignment over precomputed embeddings.
//!
//! The pipeline predicts interpretable concepts from image-patch features by
//! solving an entropic optimal-transport problem between adapted patch
//! features and adapted concept features, then classifies from the concept
//! activations with a linear head. The transport plan doubles as a
//! localization device: its columns are per-concept inversion masks over the
//! patch grid.
//!
//! Modules follow the data flow:
//!
//! - [`data`]: tensor files, dataset manifests, synthetic generator.
//! - [`nn`]: the two MLP adapters with hand-written backprop, plus the
//!   decoupled-weight-decay optimizer.
//! - [`ot`]: cosine cost, log-domain Sinkhorn, activations, inversion masks.
//! - [`priors`]: saliency-based patch prior and co-occurrence concept prior.
//! - [`losses`]: orthogonal-projection regularizers, transport-based concept
//!   BCE, cross-entropy.
//! - [`pipeline`]: two-stage training, checkpoints, inference.
//! - [`eval`]: box extraction from masks, IoU, mAP@0.5, accuracy, ablation
//!   reports.
//! - [`cli`]: the `dotcbm` command-line interface.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nn;
pub mod ot;
pub mod pipeline;
pub mod priors;

pub use error::{Error, Result};
