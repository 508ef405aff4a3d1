//! Numerical core of the edge/cloud grid co-simulation.
//!
//! Everything in this crate is a pure function over immutable inputs, so
//! values can be shared freely between worker threads.

// `!(x > 0.0)` is how these checks reject NaN along with the bad values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cases;
pub mod dynamics;
pub mod exact;
pub mod grid;
pub mod pipeline;
pub mod powerflow;
pub mod sampling;

pub use num_complex::Complex64;
