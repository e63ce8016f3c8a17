pub mod adapters;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod head;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod optim;
pub mod ra;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tape.md")]
    mod tape {}
    #[doc = include_str!("../../../book/src/encoders.md")]
    mod encoders {}
    #[doc = include_str!("../../../book/src/association.md")]
    mod association {}
    #[doc = include_str!("../../../book/src/variants.md")]
    mod variants {}
    #[doc = include_str!("../../../book/src/adapters.md")]
    mod adapters {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
