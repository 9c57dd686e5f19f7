// `!(x >= 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clustering;
pub mod config;
pub mod dirichlet;
pub mod error;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod png_io;
pub mod scene;
pub mod special;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
