//! Scheduling stack for speculative decoding with heterogeneous draft models.
//!
//! - [`model`]: requests, model profiles, acceptance sampling, cost model
//! - [`bandit`]: epoch-based explore/exploit SSM selection with regret accounting
//! - [`matcher`]: capacity-constrained maximum-weight assignment (Kuhn-Munkres)
//! - [`packer`]: padding-minimizing KV layouts and exact masked attention
//! - [`pipeline`]: discrete-event simulation of serial and micro-batched execution
//! - [`runner`]: experiment configuration, orchestration and report output

pub mod bandit;
pub mod baselines;
pub mod error;
pub mod matcher;
pub mod model;
pub mod packer;
pub mod pipeline;
pub mod runner;

pub use error::{Error, Result};
