//! Event verification toolkit.
//!
//! Decides whether an image plausibly belongs to a claimed event by extracting
//! transfer-learning features from a pretrained image backbone and scoring
//! them with a suite of classical classifiers. The backbone is treated as a
//! composition of a feature map (convolutional stack, tapped as `intermediate`)
//! and a classification head (softmax probabilities, tapped as `output`).
//! Features come in five flavors:
//!
//! * `global_intermediate` — pooled last-conv activations of the whole image
//! * `global_output`       — the backbone's class-probability vector
//! * `global_both`         — the two concatenated
//! * `local_sum`           — L1-normalized sum of per-patch output vectors
//! * `local_full`          — all per-patch output vectors concatenated
//!
//! Evaluation is one-vs-rest per event: ROC curves, per-event AUC, macro AUC,
//! and backbone x classifier grids.

pub mod backbone;
pub mod classifiers;
pub mod config;
pub mod dataset;
mod error;
pub mod evaluation;
pub mod features_global;
pub mod features_local;
pub mod pipeline;
pub mod report;
pub mod store;
pub mod synth;

pub use error::{Error, Result};
