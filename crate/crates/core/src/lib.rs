//! Numerical core of the interaction laboratory.
//!
//! Everything here is `no_std` (with `alloc`): dense symmetric linear algebra,
//! frozen-gate ReLU networks, coalition games over perturbation units, the
//! attack family with its closed-form spectral dynamics, and the executable
//! theorem checks. File formats, the CLI and parallel drivers live in the
//! `iforge` companion crate.
#![no_std]
#![forbid(unsafe_code)]
// `!(x > 0.0)` is the NaN-rejecting form used for every parameter check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attacks;
pub mod data;
pub mod densela;
pub mod gametheory;
pub mod netcore;
pub mod seed;
pub mod theoremlab;

mod error;

pub use error::Error;

pub type Result<T> = core::result::Result<T, Error>;
