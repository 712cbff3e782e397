//! Minimal reverse-mode autodiff engine used by the reconstruction
//! networks. `f64` only, single-threaded, deterministic.

mod conv;
mod dcn;
pub mod gradcheck;
mod norm;
mod ops;
mod resample;
mod tape;
pub mod window;

pub use tape::{Grads, Tape, Var};

#[cfg(test)]
mod tests;
