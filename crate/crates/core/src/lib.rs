//! Site-agnostic meta-learning on top of a small higher-order autodiff engine.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, the command line
//! and parallel drivers live in the `sitemeta` companion crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod backbone;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod metalearn;
pub mod tensor;
pub mod util;

pub use error::{Error, Result};
pub use tensor::{grad, ParamSet, Tensor};
