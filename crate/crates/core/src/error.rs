use thiserror::Error;

use crate::lattice::Momentum;
use crate::patches::PatchId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },

    #[error("patch {alpha} is not in the index set of transfer {k}")]
    PatchNotInIndexSet { alpha: PatchId, k: Momentum },

    #[error("no active patches for transfer {0}")]
    NoActivePatches(Momentum),

    #[error("matrix `{name}` is not positive definite for transfer {k} (min eigenvalue {min_eigenvalue:e}, max {max_eigenvalue:e})")]
    NotPositiveDefinite { name: &'static str, k: Momentum, min_eigenvalue: f64, max_eigenvalue: f64 },

    #[error("mode {0} is not part of the mode set")]
    UnknownMode(Momentum),

    #[error("mode set of size {size} exceeds the cap of {cap}; use a smaller Fermi momentum, transfer radius or shell thickness")]
    ModeCapExceeded { size: usize, cap: usize },

    #[error("exponential action did not converge (residual {residual:e})")]
    NoConvergence { residual: f64 },

    #[error("statistics mismatch: cannot combine fermionic and bosonic operators")]
    StatisticsMismatch,

    #[error("bracket parity mismatch: graded degree product {parity} calls for the {required} form")]
    ParityMismatch { parity: usize, required: &'static str },

    #[error("odd order {0}: only even orders contribute")]
    OddOrder(usize),

    #[error("diagram enumeration at order {order} would visit {count} contraction pairs; pass the large-order opt-in to proceed")]
    EnumerationTooLarge { order: usize, count: u128 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
