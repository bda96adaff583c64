//! Core of a multi-task natural-language-understanding trainer.
//!
//! Everything in this crate needs only `alloc`: a define-by-run reverse-mode
//! tape over dense tensors, the lexicon and context encoders, the task heads,
//! the multi-task engine, and the adversarial and distillation objectives.
//! File formats, configuration documents and the command line live in the
//! companion `mtnlu` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod adversarial;
pub mod data;
pub mod distill;
pub mod encoder;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod lexicon;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod param;
pub mod real;
pub mod reference;
pub mod rng;
pub mod sampler;
pub mod tape;
pub mod task;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
pub use model::{ModelBundle, ModelSpec};
pub use real::{DType, Real};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
