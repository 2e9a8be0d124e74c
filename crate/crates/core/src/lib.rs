//! Low-memory convolution gradients from multi-channel randomized trace
//! estimation.
//!
//! A convolution is a weighted sum of circular shifts, so each weight
//! gradient is a trace. The forward pass keeps only a probed sketch
//! `X̄ = Zᵀ X` of the layer input and the seed that generated `Z`; the
//! backward pass regenerates `Z` from the seed and returns an unbiased
//! estimate of the weight gradient.

pub mod bounds;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod lowmem;
pub mod mem_audit;
pub mod nn;
pub mod probing;
pub mod rng;
pub mod tensor;
pub mod trace;

pub use conv::{conv_forward, grad_input_exact, grad_weights_exact, ConvWeights, KernelOffsetMap, WeightGradient};
pub use error::{Error, Result};
pub use probing::{block_gram, gen_block_sparse, gen_gaussian, BlockSparsity, ProbeMatrix};
pub use rng::ProbeSeed;
pub use tensor::{adjoint_offset, circular_shift, dense_shift_matrix, ChannelTensor, ImageShape, Scalar, ShiftOffset};

/// The guide's listings, run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/shifts.md")]
    mod shifts {}
    #[doc = include_str!("../../../book/src/hutchinson.md")]
    mod hutchinson {}
    #[doc = include_str!("../../../book/src/multichannel.md")]
    mod multichannel {}
    #[doc = include_str!("../../../book/src/lowmem_layer.md")]
    mod lowmem_layer {}
    #[doc = include_str!("../../../book/src/bounds.md")]
    mod bounds {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/memory.md")]
    mod memory {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../README.md")]
    mod readme {}
}
