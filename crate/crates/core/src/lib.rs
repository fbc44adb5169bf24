//! Face completion with dual spatial attention.
//!
//! The crate is generic over the floating-point element type; see the
//! `*32`/`*64` aliases below for the concrete instantiations.

pub mod dsa;
pub mod error;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{ParamStore, Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
