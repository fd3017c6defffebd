//! Distributed Gaussian-process computation on a triangular block-cyclic
//! process grid.
//!
//! The crate is layered bottom-up:
//!
//! * [`grid`]: pure layout arithmetic (process grid, block ownership, padding).
//! * [`dense`]: column-major matrices and the local block kernels.
//! * [`rng`]: reproducible per-worker normal streams.
//! * [`transport`]: the worker runtime, the in-process and socket backends,
//!   and the per-worker named object stores.
//! * [`distla`]: distributed Cholesky, triangular solves, products,
//!   crossproducts, construction and collection.
//! * [`gp`]: the kriging engine (likelihood, fitting, prediction, simulation).
//! * [`cli`]: the batch driver behind the `distgp` binary.

pub mod cli;
pub mod dense;
pub mod distla;
mod error;
pub mod gp;
pub mod grid;
pub mod registry;
pub mod rng;
pub mod transport;

pub use error::{Error, Fault, Result};
pub use grid::{BlockLayout, Coord, ObjectKind, ObjectLayout, ProcessGrid};
pub use transport::{Backend, Cluster, ClusterOptions};
