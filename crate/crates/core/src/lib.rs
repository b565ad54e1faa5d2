//! Weakly-supervised audio-visual violence detection.
//!
//! A lightweight two-stream cross-modal attention network trained with
//! multiple-instance learning, modality-aware semi-bag contrastive losses and
//! EMA self-distillation from a concurrently trained visual-only twin.
//!
//! Module map:
//! - [`features`]: feature matrices, the `MFE1` binary format, JSON-Lines manifests.
//! - [`synth`]: synthetic asynchronous audio-visual datasets with frame ground truth.
//! - [`network`]: the two-stream network, its visual twin, and hand-derived backward passes.
//! - [`macil`]: semi-bag construction and the InfoNCE objectives.
//! - [`distill`]: cosine momentum schedule and EMA parameter infusion.
//! - [`trainer`]: joint objective, Adam, checkpoints and metrics.
//! - [`eval`]: frame-level AP, video accuracy, score/embedding export.

pub mod distill;
pub mod error;
pub mod eval;
pub mod features;
pub mod macil;
pub mod network;
pub mod optim;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

/// Number of frames covered by one snippet.
pub const FRAMES_PER_SNIPPET: usize = 16;

/// K of the K-max activation for a sequence of `t` snippets: `floor(t / 16) + 1`.
pub fn kmax_k(t: usize) -> usize {
    t / FRAMES_PER_SNIPPET + 1
}
