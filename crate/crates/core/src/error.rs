use thiserror::Error;

/// Errors raised by the analysis kernels and experiment drivers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("matrix is not positive semidefinite: eigenvalue {eigenvalue} below tolerance -{threshold}")]
    NotPsd { eigenvalue: f64, threshold: f64 },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("no minibatch stochasticity: C_r = C_f = 0, stability is governed by the spectral radius of J alone")]
    NoStochasticity,

    #[error("forget set is empty")]
    EmptyForgetSet,

    #[error("retain set is empty")]
    EmptyRetainSet,

    #[error("degenerate ensemble: all Hessians vanish, coherence is undefined")]
    DegenerateEnsemble,

    #[error("{pairs} retain/forget pairs exceed the configured limit of {max_pairs}")]
    TooManyPairs { pairs: usize, max_pairs: usize },

    #[error("threshold undefined: batch {batch} must be smaller than n_retain={n_retain} and n_forget={n_forget}")]
    UndefinedThreshold {
        batch: usize,
        n_retain: usize,
        n_forget: usize,
    },

    #[error("upper bound inapplicable: spectral radius of J is {spectral_radius}, need < 1")]
    BoundInapplicable { spectral_radius: f64 },

    #[error("infeasible construction: {0}")]
    InfeasibleSpec(String),

    #[error("invalid batch size {batch} for a set of {n} samples")]
    InvalidBatch { batch: usize, n: usize },

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    TrainingDiverged { epoch: usize, loss: f64 },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(expected: impl ToString, got: impl ToString) -> Error {
    Error::Shape {
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
