//! Spatial-temporal traffic forecasting with a partially frozen pre-LN
//! transformer over station tokens.
//!
//! The crate is organized around six layers:
//!
//! * [`tensor`] / [`graph`] / [`param`] / [`optim`] — a dense f64 tensor
//!   engine with reverse-mode autodiff, named parameters with freeze flags,
//!   and an adaptive-moment optimizer.
//! * [`data`] — traffic tensors, sliding windows with calendar indices,
//!   chronological splits, normalization, and a synthetic generator.
//! * [`embedding`] — token, temporal, and spatial embeddings fused into the
//!   transformer input.
//! * [`transformer`] — the pre-LN block stack with partially frozen
//!   attention policies.
//! * [`head`] / [`metrics`] — the regression head, training loss, and
//!   forecast metrics.
//! * [`harness`] — end-to-end experiments: pretraining, training,
//!   evaluation, few-shot, zero-shot, ablations, and sweeps.
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod checkpoint;
pub mod data;
pub mod embedding;
pub mod error;
pub mod graph;
pub mod harness;
pub mod head;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod param;
pub mod tensor;
pub mod transformer;

pub use error::{Error, Result};
pub use graph::{Graph, GradMap, NodeId};
pub use param::{ParamSet, Parameter};
pub use tensor::Tensor;
