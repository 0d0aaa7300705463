//! Unsupervised fault detection and diagnosis for multivariate sensor data.
//!
//! The pipeline pretrains a transformer feature extractor on unlabeled
//! sliding windows with two self-supervised tasks (masked reconstruction and
//! a contrastive objective over augmented views), clusters the resulting
//! embeddings with a neighbor-consistency objective, maps clusters to process
//! states using a handful of labeled samples, and optionally fine-tunes the
//! whole network on those labels. Evaluation covers clustering agreement
//! (accuracy under optimal assignment, NMI, ARI) and fault-detection metrics
//! (per-state TPR/FPR, detection rate, diagnosis rate, detection delay).
//!
//! Everything is deterministic given a seed: same config + seed produces
//! byte-identical artifacts. See the `examples/` directory for runnable
//! walkthroughs of each stage and the `sensorscan` binary for the end-to-end
//! command-line pipeline.

pub mod augmask;
pub mod cluster;
pub mod data;
pub mod error;
pub mod eval;
pub mod kmeans;
pub mod model;
pub mod pca;
pub mod pipeline;
pub mod ssl;
pub mod supervise;
pub mod nn;
pub mod util;

pub use error::{Error, Result};
