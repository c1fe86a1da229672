//! Tool flow as an action representation: per-point flow predicted by a
//! point network, turned into a rigid motion by a differentiable SVD layer
//! and trained by behavioral cloning.
//!
//! The guide in `book/` walks through each module.

// `!(x > 0.0)` style tests are used on purpose so NaN takes the error path.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod bc;
pub mod diagnostics;
pub mod envs;
pub mod error;
pub mod geom;
pub mod loss;
pub mod net;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/alignment.md")]
    mod alignment {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/environments.md")]
    mod environments {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
