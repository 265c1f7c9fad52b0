//! Differentiable pairwise regression training without the standard library.
//!
//! The crate holds the numeric core: a small reverse-mode autodiff engine,
//! the paired main/auxiliary networks, losses, metrics, data transforms and
//! the training loop. File formats and the command line live elsewhere.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod data;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;
