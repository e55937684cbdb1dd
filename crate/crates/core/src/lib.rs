//! Few-shot node classification on graphs with a Monte-Carlo uncertainty head.
//!
//! The crate is organised bottom-up:
//!
//! * [`graph`] holds the immutable CSR dataset, adjacency normalisations, the
//!   TSV dataset format and a stochastic-block-model generator.
//! * [`autodiff`] is a small reverse-mode tape over dense `f64` matrices with a
//!   sparse-dense product and a few fused kernels.
//! * [`backbones`] implements the six message-passing encoders.
//! * [`episodes`] samples n-way k-shot tasks from class splits.
//! * [`metric`] builds prototypes and the cosine/softmax baseline head.
//! * [`ugn`] is the uncertainty head: relational features, learned class
//!   graphs, a two-layer sigma network and Monte-Carlo effective similarity.
//! * [`trainer`] runs episodic training, meta-testing, partition sweeps and
//!   paired comparisons.
//! * [`check`] bundles the gradient checks and invariants behind `ugn check`.
//!
//! Data-parallel loops (evaluation episodes, Monte-Carlo rows, sparse products,
//! sweep entries) use rayon when the `parallel` feature is enabled and fall back
//! to plain iterators otherwise; see [`exec`].

pub mod autodiff;
pub mod backbones;
pub mod check;
pub mod episodes;
pub mod error;
pub mod exec;
pub mod graph;
pub mod metric;
pub mod model;
pub mod trainer;
pub mod ugn;

pub use error::{Error, Result};
