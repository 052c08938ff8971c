//! Prompt learning for lightweight dual-encoder vision-language models,
//! supervised only by a larger frozen teacher's zero-shot predictions.

// NaN must fail these checks, so `!(x > 0.0)` is intended
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![cfg_attr(test, allow(clippy::needless_range_loop))]

pub mod autograd;
pub mod class_agnostic;
pub mod config;
pub mod data;
pub mod distill;
pub mod eval;
pub mod experiment;
pub mod error;
pub mod model;
pub mod par;
pub mod plot;
pub mod prompt;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
