//! Knowledge-grounded dataset updating and contamination-resistance evaluation.
//!
//! The update pipeline takes a labeled classification dataset, pulls fresh
//! event knowledge for the entities each sample mentions, rewrites the sample
//! around that knowledge and verifies the rewrite before admitting it. The
//! evaluation side scores prediction files with macro-F1, computes the
//! δ1/δ2 performance-gain deltas between run roles and measures annotator
//! agreement with Fleiss' kappa.
//!
//! Metric kernels in [`metrics`] are generic over [`Scalar`], so the same code
//! runs in `f64` for reports and in exact rationals for oracle checks.

pub mod commands;
pub mod eval;
pub mod gateway;
pub mod knowledge;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod recontext;
pub mod reflection;
pub mod scalar;
mod text;

pub use scalar::Scalar;

/// Scores as carried through reports (percent, full precision).
pub type Score = f64;
/// Exact rational scalar used for oracle comparisons.
pub type ExactScore = num_rational::Ratio<i64>;

pub use model::{Dataset, LabelSpace, Sample, Split, TaskKind, Variant};
