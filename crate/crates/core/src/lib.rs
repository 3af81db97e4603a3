pub mod error;
pub mod linalg;
pub mod network;
pub mod compaction;
pub mod data;
pub mod trainer;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod report;
pub mod cli;
pub mod retention;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/retention.md")]
    mod retention {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/compaction.md")]
    mod compaction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
