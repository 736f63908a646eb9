pub mod bench;
pub mod codec;
pub mod config;
pub mod critic;
pub mod error;
pub mod gradnet;
pub mod model;
pub mod policy;
pub mod probe;
pub mod seeding;
pub mod shield;
pub mod sim;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/budgets.md")]
    mod budgets {}
    #[doc = include_str!("../../../book/src/shield.md")]
    mod shield {}
    #[doc = include_str!("../../../book/src/critics.md")]
    mod critics {}
    #[doc = include_str!("../../../book/src/latents.md")]
    mod latents {}
    #[doc = include_str!("../../../book/src/environments.md")]
    mod environments {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    mod diagnostics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
