//! HiF8 fake quantization, per-tensor amax scaling and a small
//! quantization-aware training laboratory.

pub mod codec;
pub mod harness;
pub mod layout;
pub mod qat;
pub mod scaling;

pub use codec::{fake_quantize, representable_grid, CodecError, CodecParams};
pub use scaling::{AmaxAlgo, ScaleRegistry, ScaleState, TensorRole};
