//! tamdp-lab: a desk-scale laboratory for studying GRPO under composite
//! verifiable rewards in tool-augmented MDPs.
//!
//! The crate builds small synthetic environments whose action space mixes
//! token generation with deterministic, depth-bounded tool calls, trains
//! tabular softmax policies with group-relative advantages, and provides
//! calculators for the convergence, decomposition, and generalization
//! bounds that the training runs are checked against.
//!
//! Modules:
//! - [`env`]: tool-augmented MDP construction and trajectory sampling
//! - [`policy`]: tabular softmax policies, scores, KL, Fisher information
//! - [`rewards`]: composite verifiable reward components and alignment
//! - [`optim`]: GRPO training loop (joint / decomposed / plain modes)
//! - [`analysis`]: bound calculators, rate fitting, gap measurement
//! - [`config`] and [`experiments`]: the config-driven grid runner

pub mod analysis;
pub mod config;
pub mod enumerate;
pub mod env;
pub mod error;
pub mod experiments;
pub mod optim;
pub mod parallel;
pub mod policy;
pub mod rewards;
pub mod seeding;

pub use error::{LabError, Result};
