//! Stability analysis of gradient-based machine unlearning.
//!
//! The crate covers symmetric-matrix kernels, per-sample Hessian ensembles,
//! the coherence measure of retain/forget curvature, the linear stability
//! recursions and thresholds, synthetic constructions, a Monte-Carlo
//! simulator of the linearized dynamics, and a two-layer CNN testbed.

// Negated comparisons are the NaN-rejecting form of parameter checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cnnmem;
pub mod coherence;
pub mod dynsim;
pub mod ensemble;
pub mod error;
pub mod matker;
pub mod seed;
pub mod stability;
pub mod synthetic;
pub mod verify;

pub use coherence::{
    coefficients, mix_coherence, mix_hessian, single_coherence, Coefficients, CoherenceOptions, CoherencePath,
    CoherenceResult, UnlearnConfig,
};
pub use ensemble::{HessianEnsemble, SampleHessian};
pub use error::{Error, Result};
pub use matker::{RankOneFactor, SymMatrix};
pub use stability::{BoundSum, Classification, ConvergenceForm, JOperator, NoiseSequence, StabilityReport};
