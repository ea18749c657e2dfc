//! Core of the composed-retrieval lab.
//!
//! Everything here is pure computation over `alloc` collections: a small
//! reverse-mode tensor engine, the synthetic scene world, prompt templates,
//! the toy multimodal encoder, the two contrastive objectives, the training
//! driver, retrieval metrics and the attention-map math. File formats, the
//! CLI and thread pools live in the `cirlab` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod attention;
pub mod autodiff;
pub mod contrastive;
pub mod cot;
pub mod dataset;
mod error;
pub mod exec;
pub mod gradcheck;
pub mod model;
pub mod real;
pub mod retrieval;
pub mod rng;
pub mod templates;
pub mod tensor;
pub mod tokenizer;
pub mod train;
pub mod world;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use real::Real;
pub use tensor::{Shape, Tensor};
