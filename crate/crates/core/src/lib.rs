//! Global-aware world model for cooperative multi-agent reinforcement
//! learning.
//!
//! The crate bundles a recurrent latent world model whose transition and
//! posterior pathways fuse all agents' information with attention
//! ([`world_model`]), Gaussian reward-trend smoothing ([`smoothing`]), a
//! decentralized recurrent MAPPO actor with a centralized critic
//! ([`policy`]), the real/pseudo replay buffers ([`buffer`]), the training
//! loop that alternates real collection, model fitting and imagination
//! ([`trainer`]), and offline global-consistency metrics ([`metrics`]).
//!
//! Runnable walkthroughs live in `examples/`; the `gawm` binary wraps the
//! same functionality for scripted runs.

pub mod autograd;
pub mod buffer;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod env;
pub mod error;
pub mod logs;
pub mod metrics;
pub mod nn;
pub mod policy;
pub mod smoothing;
pub mod trainer;
pub mod world_model;

pub use error::{GawmError, Result};
