//! SVIHR epidemic modelling with nonstandard finite differences and
//! physics-informed networks, plus a biobjective search over the loss weight.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data_io;
pub mod epi_model;
pub mod mlp;
pub mod nsfd;
pub mod pareto;
pub mod pinn_train;

/// Formats a real with 17 significant digits, enough to round-trip an `f64`.
pub fn fmt_real(x: f64) -> String {
    format!("{:.16e}", x)
}
