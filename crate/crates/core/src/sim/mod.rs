//! Constrained-MDP environments, the distance-weighted task sampler and the
//! context rollout engine with per-episode budget accounting.

mod rollout;
mod spawn;
mod task;

pub use rollout::{
    run_context, Actor, BudgetState, ContextRun, DecisionPoint, EpisodeLog, RolloutAbort, Transition,
};
pub use spawn::{sample_task, SpawnLaw};
pub use task::{
    Action, Cell, EnvKind, EnvState, StepOutcome, TaskLayout, TaskSpec, ACCEL_GAIN, GRID_ACTIONS, V_MAX,
};
