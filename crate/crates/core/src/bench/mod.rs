//! Evaluation sweeps, ablations and report files.

pub mod commands;
pub mod eval;
pub mod report;

pub use eval::{evaluate, evaluate_outcomes, task_seed, Arm, Budgets, ContextResult, EpisodeOutcome, EvalSpec, ShieldActor};
