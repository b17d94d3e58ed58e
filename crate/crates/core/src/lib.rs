#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod depthio;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod superpix;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
