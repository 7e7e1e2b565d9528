//! Graph and text fusion for node classification on heterophilic graphs:
//! a small reverse-mode autodiff engine, a relational GNN branch, a
//! transformer text branch, cross-attention fusion, and both training stages.
//!
//! `no_std` with `alloc`; file formats and the command line live in the
//! `gmlm` crate.
#![no_std]
// Dense kernels index several buffers with one loop counter.
#![allow(clippy::needless_range_loop)]
extern crate alloc;

pub mod error;
#[cfg(test)]
pub(crate) mod fixtures;
pub mod fusion;
pub mod gnn;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod nn;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use params::{ParamGroup, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
