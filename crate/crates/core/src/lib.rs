//! Annealed leap-point sampling for multimodal targets.
//!
//! The sampler runs a ladder of Hessian-adjusted annealed targets from
//! `β = 1` up to a very cold `β_max`, where an independence sampler built
//! from Laplace approximations of the discovered modes can jump between
//! modes. A hot exploration chain with quasi-Newton polishing discovers the
//! modes while sampling proceeds.
//!
//! Module map:
//! - [`mode_registry`]: discovered modes, Laplace weights, dedup rule.
//! - [`hat`]: target abstraction, HAT and truncated HAT targets, CTRMD reference.
//! - [`chain`]: within-level RWM, temperature swaps, mode-leap moves.
//! - [`exploration`]: hot chain, BFGS, Hessians, mode discovery.
//! - [`targets`]: benchmark targets and the SUR model.
//! - [`harness`]: run orchestration, baselines, diagnostics, outputs.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chain;
pub mod error;
pub mod exploration;
pub mod harness;
pub mod hat;
pub mod mode_registry;
pub mod numeric;
pub mod rng;
pub mod targets;

pub use error::{Error, Result};
