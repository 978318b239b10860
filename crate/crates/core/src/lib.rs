//! depthscope-core: residual-stream instrumentation for pre-norm transformers.
//!
//! The crate builds up in layers:
//!
//! - [`tensor`] — dense f32 tensors and the primitive ops the model needs.
//! - [`tape`] — recorded-operation reverse-mode differentiation over those
//!   primitives.
//! - [`model`] — an instrumented pre-norm transformer (grouped-query
//!   attention, rotary positions, gated MLP) that captures per-layer
//!   residual-stream traces and supports skip/erase interventions.
//! - [`container`] — the bit-exact tensor container format used for model
//!   weights and baseline statistics.
//! - [`corpus`] — prompt records, byte-level tokenization, and dataset
//!   baseline residual statistics.
//! - [`probes`] — the five residual-stream probes (cosine similarity,
//!   logit lens, layer skip, residual erasure, gradient attribution).
//! - [`detect`] — effective-depth detectors over aggregated probe curves.
//! - [`synthetic`] — planted-transition trace generation for validating
//!   the detectors against known ground truth.
//! - [`report`] — curve files, run manifests, report documents, and
//!   CSV/SVG emission.

pub mod container;
pub mod corpus;
pub mod detect;
mod error;
pub mod model;
pub mod probes;
pub mod report;
pub mod synthetic;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
