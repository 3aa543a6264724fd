//! Mixture-of-LoRA-and-full fine-tuning: every adapted layer carries a set of
//! experts (the dense weight plus LoRA adapters of several ranks), and a
//! sparse AdamW variant picks which of them to update at each step from their
//! predicted loss drop.

pub mod check;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod optimizer;
pub mod scoring;
pub mod synthtasks;

pub use error::{Error, Result};
