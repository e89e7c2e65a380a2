//! Diffusion policy with a working-memory window and a recursively
//! compressed episodic memory, on a small `f64` autodiff engine.
//!
//! The guide in `book/` walks through the pieces; its code blocks are
//! compiled and run as doctests of this crate.

pub mod autodiff;
pub mod compressor;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod encoder;
pub mod envs;
pub mod error;
pub mod harness;
pub mod memory;
pub mod nn;
pub mod optim;
pub mod policy;
pub mod tensor;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/working-memory.md")]
    mod working_memory {}
    #[doc = include_str!("../../../book/src/episodic-memory.md")]
    mod episodic_memory {}
    #[doc = include_str!("../../../book/src/diffusion.md")]
    mod diffusion {}
    #[doc = include_str!("../../../book/src/tasks.md")]
    mod tasks {}
    #[doc = include_str!("../../../book/src/harness.md")]
    mod harness {}
}
