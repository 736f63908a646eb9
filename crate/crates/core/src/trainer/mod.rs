//! Replay, per-sample objectives and the collection/update loop.

pub mod buffer;
pub mod losses;
pub mod train;

pub use buffer::{ReplayBuffer, Slot};
pub use losses::{
    lagrange_update, policy_improvement, prepare, sample_tape, ActorConsts, LossSettings, LossValues, LossVars, Prepared,
    SampleInput,
};
pub use train::{EpochReport, LossReport, Trainer};
