#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod inner;
pub mod linalg;
pub mod loss;
pub mod optim;
pub mod reduced;
pub mod regularizer;

pub use error::{Error, Result};
