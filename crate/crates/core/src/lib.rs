// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod density;
pub mod error;
pub mod evaluate;
pub mod io;
pub mod kernel;
pub mod quadrature;
pub mod rng;
pub mod skeleton;
pub mod solver;
pub mod structures;

pub use error::{Error, Result};
