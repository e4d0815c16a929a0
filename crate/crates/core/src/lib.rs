#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod losses;
pub mod nn;
pub mod ot;
pub mod pipeline;
pub mod synthesis;

pub use error::{Error, Result};
