//! The L2 multivariate Huber distribution and the tools around it: sampling,
//! an SPD matrix parameterization with an analytic backward pass, robust
//! regression losses, maximum-likelihood fusion, and a synthetic experiment
//! harness.

pub mod cli;
pub mod dist;
pub mod error;
pub mod estimator;
pub mod fusion;
pub mod gradcheck;
pub mod io;
pub mod losses;
mod quadrature;
pub mod spd;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/distribution.md")]
    mod distribution {}
    #[doc = include_str!("../../../book/src/spd.md")]
    mod spd {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
