//! Experiment-matrix orchestration.
//!
//! A configuration matrix declares named parameter dimensions, run-wide
//! settings and exclusion rules. [`expand::expand`] turns it into a
//! [`expand::TaskPlan`] of hash-identified tasks; [`engine::Engine`] runs
//! the plan on a bounded worker pool, consulting a content-addressed
//! [`store::CheckpointStore`] so finished tasks are restored instead of
//! re-executed, and records every outcome in an append-only
//! [`manifest`] so interrupted runs can resume.

pub mod cli;
pub mod config;
pub mod engine;
pub mod expand;
pub mod identity;
pub mod manifest;
pub mod notify;
pub mod report;
pub mod store;
mod time;

pub use config::{ConfigMatrix, Diagnostic, ExclusionRule, ParamValue, Settings};
pub use engine::{Engine, RunOptions, RunReport, RunnerSpec, TaskResult, TaskStatus};
pub use expand::{expand, Assignment, TaskPlan};
pub use identity::TaskKey;
pub use store::CheckpointStore;

/// Version string recorded in checkpoint metadata.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
