//! Entropy-driven acceleration machinery for multi-scale autoregressive
//! generators: an exact streaming attention-entropy kernel, the scale / layer /
//! token pruning policy built on its statistics, a small next-scale generator
//! to run the policy end to end, and a Monte-Carlo check of the average-case
//! error model behind it.
//!
//! The guide in `book/` walks through each piece; its code listings are
//! compiled and run as doc-tests of this crate.

pub mod bounds;
pub mod calibrate;
pub mod classify;
pub mod kernel;
pub mod policy;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod toy;
pub mod tprv;

pub use kernel::{
    flash_attention, flash_attention_entropy, naive_attention_entropy, AttentionInput,
    AttentionResult, BlockConfig,
};
pub use rng::SeededRng;
pub use tensor::{Matrix2D, ScaleSchedule};

// The guide's listings, compiled and run as doc-tests. One module per chapter
// so a failure names its chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/entropy-kernel.md")]
    mod entropy_kernel {}
    #[doc = include_str!("../../../book/src/statistics.md")]
    mod statistics {}
    #[doc = include_str!("../../../book/src/layer-classification.md")]
    mod layer_classification {}
    #[doc = include_str!("../../../book/src/pruning-policy.md")]
    mod pruning_policy {}
    #[doc = include_str!("../../../book/src/calibration.md")]
    mod calibration {}
    #[doc = include_str!("../../../book/src/toy-generator.md")]
    mod toy_generator {}
    #[doc = include_str!("../../../book/src/error-bounds.md")]
    mod error_bounds {}
    #[doc = include_str!("../../../book/src/command-line.md")]
    mod command_line {}
    #[doc = include_str!("../../../book/src/file-formats.md")]
    mod file_formats {}
}
