use thiserror::Error;

/// Errors surfaced by model construction, solvers, and IO.
#[derive(Error, Debug)]
pub enum Error {
    /// A stochastic vector or matrix row failed validation.
    #[error("stochasticity violation in {what}: row {index} sums to {sum} (tolerance {tol})")]
    NotStochastic {
        what: &'static str,
        index: usize,
        sum: f64,
        tol: f64,
    },

    /// A probability entry was negative.
    #[error("negative probability in {what} at index {index}: {value}")]
    NegativeProbability {
        what: &'static str,
        index: usize,
        value: f64,
    },

    /// Generic shape mismatch between two related objects.
    #[error("shape mismatch: {context} (expected {expected}, got {got})")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    /// A scalar parameter was outside its documented range.
    #[error("parameter {name} out of range: {value} ({requirement})")]
    BadParameter {
        name: &'static str,
        value: f64,
        requirement: &'static str,
    },

    /// A quantity that must be finite was not.
    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    /// Logarithm of a zero policy entry was requested.
    #[error("zero policy probability at (t={t}, a={a}, s={s}); log-policy undefined")]
    ZeroPolicyEntry { t: usize, a: usize, s: usize },

    /// The simplex solver hit its iteration limit before deciding feasibility.
    #[error("solver stalled: phase-1 simplex exceeded {limit} iterations (objective {objective})")]
    SolverStalled { limit: usize, objective: f64 },

    /// A matrix factorization failed to converge.
    #[error("{what} factorization failed")]
    Factorization { what: &'static str },

    /// An internal invariant guaranteed by theory was violated at runtime.
    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    /// Subspace alignment failed because the bases are essentially orthogonal.
    #[error(
        "alignment change of basis is singular: smallest principal angle {angle_rad} rad \
         (subspaces too far apart)"
    )]
    SingularAlignment { angle_rad: f64 },

    /// Horizon or index inconsistency between pipeline stages.
    #[error("index error: {0}")]
    Index(String),

    /// CLI/pipeline stage failure wrapper naming the failing stage.
    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    /// Filesystem problem.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Text-format parse problem with location information.
    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },

    /// Command-line arguments that clap cannot rule out on its own.
    #[error("usage: {0}")]
    Usage(String),
}

impl Error {
    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}
