//! Crate-wide error type.
//!
//! Every fallible operation returns [`Error`]; the CLI maps each variant
//! family to a distinct exit code.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // -- expression parsing / evaluation --
    #[error("syntax error at byte {offset}: expected {expected}, found {found}")]
    Syntax {
        offset: usize,
        expected: String,
        found: String,
    },
    #[error("unknown function `{name}` at byte {offset}")]
    UnknownFunction { name: String, offset: usize },
    #[error("malformed symbol `{name}` at byte {offset}")]
    MalformedSymbol { name: String, offset: usize },
    #[error("domain error: {reason} in `{subexpr}`")]
    EvalDomain { reason: String, subexpr: String },
    #[error("unbound symbol `{name}`")]
    UnboundSymbol { name: String },

    // -- model files --
    #[error("model format error on line {line}: {msg}")]
    ModelFormat { line: usize, msg: String },
    #[error("dimension mismatch: symbol `{symbol}` not among the declared coordinates")]
    DimensionMismatch { symbol: String },

    // -- Hessian analysis --
    #[error("rank varies across probe states ({details})")]
    RankVariation { details: String },
    #[error("every probe state hit a domain error while evaluating the Hessian")]
    AllProbesDegenerate,
    #[error("no nonsingular principal minor of size {size} found (best |det| {best_det:.3e})")]
    PartitionUnavailable { size: usize, best_det: f64 },

    // -- Legendre inversion --
    #[error("velocity solve did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("singular Jacobian in velocity solve (pivot {pivot:.3e} below threshold {threshold:.3e})")]
    SingularJacobian { pivot: f64, threshold: f64 },
    #[error("Hamiltonians depend on noncanonical velocities (max deviation {deviation:.3e}); nondynamical regime required")]
    Condition42Violation { deviation: f64 },

    // -- brackets / velocity system --
    #[error("observable references symbols outside the active phase space: `{symbol}`")]
    SymbolSpaceMismatch { symbol: String },
    #[error("F tensor singular: rank {r_f} < dimension {dim}; nongauge bracket undefined")]
    SingularF { r_f: usize, dim: usize },
    #[error("gauge block decomposition missing for a rank-deficient F tensor")]
    MissingDecomposition,
    #[error("inconsistent linear system for noncanonical velocities (residual {residual:.3e})")]
    InconsistentSystem { residual: f64 },

    // -- integration --
    #[error("initial condition inconsistent: {detail}")]
    InitialCondition { detail: String },
    #[error("trajectory too short for finite differences ({len} points, need at least 3)")]
    TrajectoryTooShort { len: usize },

    // -- constraint analysis --
    #[error("phase point off the constraint surface (max |phi| = {max_phi:.3e})")]
    OffSurface { max_phi: f64 },
    #[error("consistency produced a relation independent of the multipliers: {detail}")]
    HigherStageConstraint { detail: String },

    // -- plumbing --
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("internal invariant violated: {0}")]
    Internal(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Module family the error originates from, for machine-parsable reporting.
    pub fn module(&self) -> &'static str {
        use Error::*;
        match self {
            Syntax { .. } | UnknownFunction { .. } | MalformedSymbol { .. }
            | EvalDomain { .. } | UnboundSymbol { .. } => "expr",
            ModelFormat { .. } | DimensionMismatch { .. } | RankVariation { .. }
            | AllProbesDegenerate | PartitionUnavailable { .. } => "model",
            NoConvergence { .. } | SingularJacobian { .. } | Condition42Violation { .. } => {
                "legendre"
            }
            SymbolSpaceMismatch { .. } | SingularF { .. } | MissingDecomposition
            | InconsistentSystem { .. } => "brackets",
            InitialCondition { .. } | TrajectoryTooShort { .. } => "dynamics",
            OffSurface { .. } | HigherStageConstraint { .. } => "dirac",
            Config(_) => "cli",
            Internal(_) | Io(_) => "internal",
        }
    }

    /// Stable nonzero exit code for the CLI, one per error family.
    pub fn exit_code(&self) -> i32 {
        use Error::*;
        match self {
            Config(_) => 2,
            Syntax { .. } | UnknownFunction { .. } | MalformedSymbol { .. } => 3,
            EvalDomain { .. } | UnboundSymbol { .. } => 4,
            ModelFormat { .. } | DimensionMismatch { .. } => 5,
            RankVariation { .. } | AllProbesDegenerate | PartitionUnavailable { .. } => 6,
            NoConvergence { .. } | SingularJacobian { .. } => 7,
            Condition42Violation { .. } => 8,
            SymbolSpaceMismatch { .. } | SingularF { .. } | MissingDecomposition => 9,
            InconsistentSystem { .. } | InitialCondition { .. } => 10,
            TrajectoryTooShort { .. } => 11,
            OffSurface { .. } | HigherStageConstraint { .. } => 12,
            Io(_) => 13,
            Internal(_) => 70,
        }
    }
}
