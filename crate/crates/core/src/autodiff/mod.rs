//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Graphs are built eagerly: each op computes its value immediately and
//! records what its vector-Jacobian product needs. Parameters live in a
//! [`ParamStore`] outside the graph so one store can feed many graphs.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;

pub use gradcheck::{finite_difference_check, relative_error, GradCheckReport, Probe};
pub use graph::{BatchStats, Gradients, Graph, Var, MAGNITUDE_EPS};
pub(crate) use graph::sigmoid;
pub use params::{ParamId, ParamStore, Parameter};
