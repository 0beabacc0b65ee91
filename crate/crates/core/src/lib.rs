//! Vacancy-lattice resistor networks, temperature coefficients, filament dynamics and
//! crossbar inference for RRAM cells.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod crossbar;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod lattice;
pub mod mlp;
pub mod network;
pub mod seed;
pub mod stats;
pub mod tcoeff;

pub use error::{Error, Result};
