#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod fixed_point;
pub mod io;
pub mod matrix_analytic;
pub mod meanfield_ode;
pub mod model;
pub mod particle_sim;
pub mod state_space;

pub use error::{Error, Result};
