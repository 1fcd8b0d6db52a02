// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod covariates;
pub mod encounters;
pub mod error;
pub mod geometry;
pub mod inference;
pub mod likelihood;
pub mod model;
pub mod optim;
pub mod selection;
pub mod simulate;

pub use error::{Result, ScrError};
