//! Curriculum training of a small decoder-only transformer with attention-head
//! and representation analysis.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod heads;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
