//! Desk-scale pretraining and fine-tuning recipe for a disentangled-attention
//! transformer encoder.
//!
//! Numeric code is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checks); the aliases below fix the common instantiations.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod corruption;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod heads;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod tokens;

pub use autodiff::{Tape, Var};
pub use encoder::{count_parameters, EncoderConfig, EncoderState, SequenceBatch};
pub use error::{Error, Result};
pub use params::{Bindings, GradSet, ParamSet};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use tokens::TokenSequence;

/// Training precision.
pub type Tensor32 = Tensor<f32>;
/// Gradient-check precision.
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type EncoderState32 = EncoderState<f32>;
pub type EncoderState64 = EncoderState<f64>;
pub type ParamSet32 = ParamSet<f32>;
pub type AdamW32 = optim::AdamWState<f32>;
