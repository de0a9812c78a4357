//! HiLo attention and the LITv2 backbone on a small dense-tensor core.
//!
//! The crate pairs the attention layers with an exact multiply-accumulate
//! cost model, a CPU throughput harness, a frequency-spectrum analyzer and a
//! deterministic toy trainer.

pub mod attention;
pub mod backbone;
pub mod bench;
pub mod checkpoint;
pub mod cost;
pub mod dft;
pub mod error;
pub mod gradsuite;
pub mod io;
pub mod nn;
pub mod rng;
pub mod spectrum;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::RngState;
pub use tensor::{DType, Scalar, Tensor};
