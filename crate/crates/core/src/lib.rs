pub mod align;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod diffusion;
pub mod edit;
pub mod error;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;
pub mod vocab;
pub mod world;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/edit-scripts.md")]
    mod edit_scripts {}
    #[doc = include_str!("../../../book/src/noising.md")]
    mod noising {}
    #[doc = include_str!("../../../book/src/alignment.md")]
    mod alignment {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/generation.md")]
    mod generation {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
