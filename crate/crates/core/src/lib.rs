//! Sequency-ordered Walsh and grouped block-diagonal rotations for low-bit
//! post-training quantization.
//!
//! * [`transform`]: Sylvester Hadamard, Walsh and block-diagonal matrices,
//!   sequency statistics, fast transforms.
//! * [`quant`]: RTN and GPTQ group quantizers and error metrics.
//! * [`rotation`]: rotation slots, weight rotation and a toy transformer block.
//! * [`lab`]: synthetic corpora, variant comparisons and the R4 ablation.
//! * [`io`]: tensor files and CSV reports.
//!
//! The guide in `book/` walks through each part; its code blocks run as
//! doctests of this crate.

pub mod io;
pub mod lab;
pub mod quant;
pub mod rotation;
pub mod transform;

// book chapters, checked by `cargo test --doc`
#[cfg(doctest)]
#[doc = include_str!("../../../README.md")]
mod readme {}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/sequency.md")]
    mod sequency {}
    #[doc = include_str!("../../../book/src/block-rotations.md")]
    mod block_rotations {}
    #[doc = include_str!("../../../book/src/quantization.md")]
    mod quantization {}
    #[doc = include_str!("../../../book/src/rotation-slots.md")]
    mod rotation_slots {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/file-format.md")]
    mod file_format {}
}
