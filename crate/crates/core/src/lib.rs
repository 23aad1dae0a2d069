//! Text-based person search mechanisms at desk scale.
//!
//! The crate covers set-prediction matching, prototype-guided feature
//! decoupling, cross-modal re-identification losses, confidence-fusion
//! inference and retrieval evaluation, driven by a deterministic synthetic
//! scene and embedding generator.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod assignment;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod numgrad;
pub mod pud;
pub mod reid;
pub mod synth;

pub use error::{Error, Result};
pub use geometry::BBox;
pub use linalg::Embedding;
