//! Neural ODEs and universal differential equations for the Lorenz system,
//! trained by differentiating through a fixed-step RK4 solver.
//!
//! The guide in `book/` walks through the pieces in order; its code samples
//! run as doc-tests.

// `!(x > 0.0)` is how validation rejects NaN along with the out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod integrate;
pub mod net;
pub mod node;
pub mod optim;
pub mod train;
pub mod ude;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/lorenz.md")]
    mod lorenz {}
    #[doc = include_str!("../../../book/src/networks.md")]
    mod networks {}
    #[doc = include_str!("../../../book/src/gradients.md")]
    mod gradients {}
    #[doc = include_str!("../../../book/src/optimizers.md")]
    mod optimizers {}
    #[doc = include_str!("../../../book/src/node.md")]
    mod node {}
    #[doc = include_str!("../../../book/src/ude.md")]
    mod ude {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
