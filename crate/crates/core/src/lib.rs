//! Attenuated broken ray transform on convex polytopes with flat
//! reflecting boundary.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod billiards;
pub mod checks;
pub mod cli;
pub mod geometry;
pub mod normal_ops;
pub mod phantoms_io;
pub mod reconstruction;
pub mod transport;
pub mod unfolding;
pub mod visibility;
