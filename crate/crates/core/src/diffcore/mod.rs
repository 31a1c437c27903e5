//! Minimal reverse-mode differentiation over dense tensors.
//!
//! The op set is closed: exactly what the super-resolution transformer, its
//! losses and its metrics need. Each op evaluates eagerly on a [`Tape`] and
//! records its vector-Jacobian product; [`Tape::backward`] replays them in
//! reverse.

mod attention;
mod element;
mod tape;
mod tensor;

pub use attention::{multi_head_attention, multi_head_attention_with_weights, AttentionWeights};
pub use element::Element;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{ParamId, ParamSet, Parameter, Tensor};

/// Default layer-norm epsilon used throughout the model.
pub const LAYER_NORM_EPS: f64 = 1e-6;
