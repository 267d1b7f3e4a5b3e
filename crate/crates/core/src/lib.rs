//! Dataset generality of convolutional features: how well a network
//! prejudiced on one dataset retrains on another with only its last `k`
//! units free.
//!
//! The guide lives in `book/`; its code blocks run as doctests below.

pub mod datasets;
pub mod experiment;
pub mod gradcheck;
pub mod kernels;
pub mod network;
pub mod optim;
pub mod seeds;
pub mod tensor;
pub mod transfer;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/quickstart.md")]
    mod quickstart {}
    #[doc = include_str!("../../../book/src/datasets.md")]
    mod datasets {}
    #[doc = include_str!("../../../book/src/networks.md")]
    mod networks {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/generality.md")]
    mod generality {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/files.md")]
    mod files {}
    #[doc = include_str!("../../../book/src/acceptance.md")]
    mod acceptance {}
}
