//! Dense networks with reverse-mode gradients.
//!
//! Parameters are stored as `f32` in [`ParamStore`]s; every forward and
//! backward computation runs in `f64`. [`Tape`] records operations,
//! [`Mlp`] builds tanh networks on top of it, and [`adam_step`] /
//! [`polyak_update`] update stores in place.

pub mod checkpoint;
mod mlp;
mod optim;
mod params;
mod tape;

pub use mlp::{Activation, Bind, Mlp};
pub use optim::{adam_step, polyak_update, AdamConfig, AdamState};
pub use params::{clip_global_norm, Gradients, ParamKey, ParamStore, Tensor};
pub use tape::{Tape, Var};

pub(crate) use tape::softmax;
