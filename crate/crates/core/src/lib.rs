//! Condensed-context refinement for feature pyramids.
//!
//! The crate is `no_std` (it needs `alloc`) and contains everything that is
//! pure computation:
//!
//! - [`tensor`], [`kernels`] and [`graph`]: dense f64 tensors, the primitive
//!   kernels, and a reverse-mode gradient tape over them.
//! - [`pyramid`]: a toy backbone plus FPN-style additive fusion with a
//!   pluggable refinement (none, 3x3 conv, or TCC).
//! - [`tcc`]: condensed context collection (dilated local token plus gated
//!   key-point global tokens) and the single-head decoder.
//! - [`flops`]: analytical FLOPs/parameter accounting.
//! - [`synth`]: synthetic blob scenes, heatmap targets, the training loop,
//!   recall evaluation and context traces.
//! - [`gradcheck`]: finite-difference checks of every differentiable
//!   operation.
//!
//! File formats, configuration and the command line live in the `tcc-cli`
//! companion crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod math;
pub mod params;
pub mod pyramid;
pub mod rng;
pub mod synth;
pub mod tcc;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
