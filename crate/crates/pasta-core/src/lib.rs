//! Workbench for patch-wise backdoor attacks on small Vision Transformers.
//!
//! The crate is organized around the attack pipeline:
//!
//! - [`tensor`] — reverse-mode autodiff tape over dense `ndarray` tensors,
//!   generic over `f32`/`f64`.
//! - [`vit`] — a configurable Vision Transformer whose forward pass exposes
//!   every layer's attention matrices.
//! - [`trigger`] — patch masks, SUP/REP/blend insertion, bound clamping, and
//!   the hierarchical multi-location sampler.
//! - [`objectives`] — the four loss terms (clean, backdoor, visual,
//!   attention) and their phase-level aggregations.
//! - [`trainer`] — clean pretraining plus the alternating trigger/model
//!   optimization loop and its baselines.
//! - [`eval`] — ACC/ASR, per-patch attack-success heatmaps, and visual /
//!   attention stealthiness metrics.
//! - [`defense`] — patch operations, flip-count detection, attention
//!   blocking, Gaussian filtering, entropy screening, and MLP pruning.
//! - [`formats`] — versioned checkpoint and trigger file containers.
//! - [`gradcheck`] — finite-difference oracles used by the test suites.

pub mod data;
pub mod defense;
pub mod error;
pub mod eval;
pub mod formats;
pub mod gradcheck;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod trigger;
pub mod vit;

pub use error::{CoreError, Result};
