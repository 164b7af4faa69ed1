//! Gated residual score models on CPU: autodiff, stacks, forward processes,
//! sensitivities, training and evaluation. The guide in `book/` walks through
//! each module.

pub mod autodiff;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod residual;
pub mod rng;
pub mod sensitivity;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// The guide's chapters, compiled so their snippets run as doctests.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/gated-residuals.md")]
    mod gated_residuals {}
    #[doc = include_str!("../../../book/src/dynamics.md")]
    mod dynamics {}
    #[doc = include_str!("../../../book/src/sensitivity.md")]
    mod sensitivity {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
