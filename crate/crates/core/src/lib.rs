//! Desk-scale continual fine-tuning laboratory.
//!
//! Trains a micro decoder-only transformer from scratch, fine-tunes it with
//! LoRA adapters under a KL-regularized objective with replay interleaving,
//! and measures forgetting/plasticity plus modeled-vs-measured FLOPs.

pub mod adamw;
pub mod checkpoint;
pub mod cost;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod grid;
pub mod model;
pub mod objective;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use adamw::{AdamWConfig, AdamWState};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
