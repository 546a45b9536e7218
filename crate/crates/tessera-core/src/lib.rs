//! Desk-scale building blocks for flexible-patch vision-transformer
//! self-distillation: a small reverse-mode tensor core, 2D rotary position
//! embeddings, pseudo-inverse patch-kernel resizing, the DINO/iBOT training
//! loop with numeric-format emulation, plus the synthetic tile corpus and
//! embedding probes used to evaluate the result.
//!
//! Everything is generic over the scalar type through [`scalar::Scalar`];
//! `f32` is the working precision, `f64` exists for oracles and gradient
//! checks. The concrete aliases below cover the common cases.

pub mod error;
pub mod scalar;
pub mod tensor;

pub mod linalg;
pub mod rng;

pub mod nn;
pub mod rope;

pub mod encoder;
pub mod flexi;

pub mod precision;
pub mod ssl;

pub mod corpus;
pub mod probe;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Encoder32 = encoder::Encoder<f32>;
pub type Encoder64 = encoder::Encoder<f64>;
pub type Trainer32 = ssl::Trainer<f32>;
pub type Trainer64 = ssl::Trainer<f64>;
