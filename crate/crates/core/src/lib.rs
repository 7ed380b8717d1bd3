// `!(x > 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config_file;
pub mod counting;
pub mod crowd;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod nn;
pub mod service;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Elem, Tensor};
