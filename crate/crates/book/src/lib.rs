//! Code listings of the guide under `book/`, compiled as doctests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/state_space.md")]
pub mod state_space {}

#[doc = include_str!("../../../book/src/models.md")]
pub mod models {}

#[doc = include_str!("../../../book/src/matrix_analytic.md")]
pub mod matrix_analytic {}

#[doc = include_str!("../../../book/src/fixed_points.md")]
pub mod fixed_points {}

#[doc = include_str!("../../../book/src/ode.md")]
pub mod ode {}

#[doc = include_str!("../../../book/src/particles.md")]
pub mod particles {}

#[doc = include_str!("../../../book/src/metastability.md")]
pub mod metastability {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
