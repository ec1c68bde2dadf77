//! Certified out-of-distribution detection with interval bound propagation.

pub mod attacks;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod interval;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod tensor;
pub mod train;

pub use error::{Error, ParseError, Result};
pub use tensor::Tensor;

/// Guide chapters, compiled so their snippets run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/intervals.md")]
    mod intervals {}
    #[doc = include_str!("../../../book/src/certification.md")]
    mod certification {}
    #[doc = include_str!("../../../book/src/good.md")]
    mod good {}
    #[doc = include_str!("../../../book/src/attacks.md")]
    mod attacks {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
