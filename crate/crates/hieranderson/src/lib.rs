//! Hierarchical Anderson model toolkit: the hierarchical Laplacian, its
//! random finite-volume restrictions with Neumann and Dirichlet boundary
//! conditions, and the spectral statistics at the top of the spectrum
//! (integrated density of states, Dirichlet-Neumann bracketing, Temple
//! bounds, Lifshits-tail estimates).
//!
//! Start from [`hierarchy::HierarchicalStructure`] and
//! [`weights::WeightSequence`], build operators with
//! [`operators::FiniteVolumeHamiltonian`], and run experiments through the
//! functions in [`analysis`]. The `examples/` directory walks through each
//! capability end to end; the `hieranderson` binary drives the same
//! experiments from TOML configs.

// `!(a <= b)` deliberately rejects NaN alongside out-of-order bounds;
// indexed loops walk several parallel arrays at once.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod error;
pub mod hierarchy;
pub mod logdomain;
pub mod operators;
pub mod randomness;
pub mod runner;
pub mod spectra;
pub mod weights;

pub use error::{Error, Result};
