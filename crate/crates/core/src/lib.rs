//! Map-free multimodal vehicle trajectory prediction.
//!
//! The crate covers the full pipeline: raw record ingestion, scene
//! normalization and social masking, motion-mode clustering, a
//! global-context-aware encoder plus a hierarchical interaction decoder
//! built on a small reverse-mode autodiff engine, dual-head training,
//! and a best-of-N evaluation suite with plot-ready exports.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod modes;
pub mod numerics;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use numerics::{AdamState, GradCheckReport, Gradients, Tape, Tensor};
