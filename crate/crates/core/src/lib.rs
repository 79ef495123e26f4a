//! Local computation of global linear transformations on networks.
//!
//! Given a connected graph and a target `T`, decides whether node states can
//! be driven from `x(t0) = xi` to `x(tf) = T xi` using only time-varying
//! weights on the graph's edges, and synthesizes minimum-energy weights by
//! solving the associated boundary value problem.

pub mod dynamics;
pub mod error;
pub mod graph;
pub mod io;
pub mod lie_algebra;
pub mod optimal_control;
pub mod parallel;
pub mod scenarios;

pub use error::{Error, Result};
pub use graph::{Graph, GraphSpec, SparsityMask};
pub use nalgebra;
