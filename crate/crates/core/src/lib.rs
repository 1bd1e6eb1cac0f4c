//! Geometry-grounded cross-view alignment primitives.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`ops`] and [`tape`] form a small dense `f64` tensor library
//!   with reverse-mode differentiation over the handful of operations the
//!   alignment modules need.
//! - [`mgsa`] fuses three dilated scale branches with depth-regressed,
//!   softmax-normalised per-pixel weights.
//! - [`mgsf`] turns a depth map into a geometric attention mask (dilated
//!   Sobel gradients, surface normals, dominant-plane k-means, sigmoid gate,
//!   neutral edges) and modulates features with it.
//! - [`losses`] holds the geometric ranking hinge, the soft-margin triplet
//!   loss and their weighted combination.
//! - [`scene`] renders synthetic box-city depth maps with exact labels.
//! - [`retrieval`] runs a miniature cross-view retrieval experiment.
//! - [`gradcheck`] compares taped gradients against central differences.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

mod error;
pub mod gradcheck;
pub mod losses;
mod math;
pub mod mgsa;
pub mod mgsf;
pub mod ops;
pub mod quantile;
pub mod retrieval;
pub mod scene;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Grouping, Kernel2D, Padding, Tensor};
