//! Incremental cross-domain CTR training lab.
//!
//! Several per-domain click models and one target model are trained period by
//! period. After each warm start, the frozen per-domain models act as
//! teachers: a gating network aggregates their representations and logits, an
//! adversarially trained mapper aligns the aggregate with the target's
//! feature space, and the target distills from the aligned signals alongside
//! its own click loss. Serving needs the target backbone only.

pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod extractor;
pub mod io;
pub mod migrator;
pub mod nn;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
