//! Consensus Propagation: Gaussian belief propagation for distributed
//! averaging on weighted graphs, its linearization around the fixed point,
//! and the spectral analysis of that linearization.
//!
//! Module map:
//!
//! - [`graph`], [`io`]: weighted graphs, Erdős-Rényi sampling, file formats.
//! - [`cp`], [`oracle`]: the message engine and the exact Gaussian modes.
//! - [`linearize`]: Jacobian blocks `A`, `B`, `C` and the affine averaging map.
//! - [`spectral`]: dense spectra, power iteration, convergence ratios.
//! - [`experiments`]: seeded studies producing [`experiments::ExperimentRecord`]s.

pub mod cp;
pub mod error;
pub mod experiments;
pub mod graph;
pub mod io;
pub mod kv;
pub mod linearize;
pub mod oracle;
pub mod rng;
pub mod sparse;
pub mod spectral;

pub use cp::{
    beliefs, init_messages, run_to_convergence, step, FixedPoint, InitScheme, MessageState,
    Propagator, RunOptions,
};
pub use error::{Error, Result};
pub use graph::{
    assign_couplings, generate_connected_erdos_renyi, generate_erdos_renyi, weighted_laplacian,
    DirectedEdgeIndex, Graph, NodeValues,
};
pub use linearize::{affine_averaging, finite_diff_jacobian, jacobian_blocks, AffineAveraging, JacobianBlocks};
pub use oracle::exact_marginal_modes;
