//! Desk-scale laboratory for reward-based post-training of tiny
//! autoregressive policies on verifiable synthetic tasks.
//!
//! Module map:
//! - [`types`], [`rng`], [`config`]: shared domain types, seeded streams,
//!   algorithm configuration and validation.
//! - [`policy`]: tabular k-gram and MLP softmax policies, surrogate
//!   objectives with exact gradients, AdamW, checkpoints.
//! - [`env`]: synthetic tasks with exact verifiers and +/-1 rewards.
//! - [`algo`]: selection, filtering, advantages, clipped terms, DPO.
//! - [`trainer`]: the rollout / filter / multi-step update loop and metrics.
//! - [`oracle`]: brute-force enumeration, exact gradients, estimator audits.
//! - [`experiment`]: config files, run directories, comparison and export.

pub mod algo;
pub mod config;
pub mod env;
pub mod error;
pub mod experiment;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod trainer;
pub mod types;

pub use config::{validate_config, AlgoConfig, AlgoKind, FilterKind};
pub use error::{Error, Result};
pub use policy::{PolicyParams, PolicySpec};
pub use rng::{make_rng, RngStream};
pub use types::*;
