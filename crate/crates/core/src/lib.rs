//! Friedrichs-diagram evaluation of the excitation density of a mean-field
//! Fermi gas trial state.
//!
//! The crate is organised bottom-up:
//!
//! * [`lattice`]: momentum lattice, Fermi ball and transfer set.
//! * [`patches`]: Fermi-surface patches, index sets and pair counts.
//! * [`kernel`]: interaction data and the per-transfer `K(k)` pipeline.
//! * [`fock`]: brute-force fermionic Fock-space oracle.
//! * [`diagrams`]: normal-ordered operators, attached products and the
//!   maximally-crossed sign rule.
//! * [`series`]: diagram enumeration for the excitation-density series, its
//!   bosonized restriction and the closed form.
//! * [`config`] / [`verify`]: run configuration and the invariant suite used
//!   by the command-line front end.

pub mod config;
pub mod diagrams;
pub mod error;
pub mod fock;
pub mod kernel;
pub mod lattice;
pub mod numeric;
pub mod patches;
pub mod series;
pub mod verify;

pub use config::{Method, Preset, RunConfig, System};
pub use error::{Error, Result};
pub use fock::{FermionOperator, FockState, ModeSet, SparseFockOperator};
pub use kernel::{KMatrixBundle, Potential};
pub use lattice::{FermiSystem, Momentum};
pub use patches::{IndexSets, PairCount, PatchId, PatchScheme};
pub use series::{NqResult, QSide, SeriesContext};
