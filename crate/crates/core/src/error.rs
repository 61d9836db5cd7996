use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Case-file syntax problem, with a 1-based line number where available.
    #[error("case syntax error at line {line}: {message}")]
    CaseSyntax { line: usize, message: String },

    /// Structurally invalid network (missing slack, duplicate ids, disconnected, ...).
    #[error("invalid case: {0}")]
    InvalidCase(String),

    /// Newton iteration failed to converge or produced non-finite values.
    #[error("power flow diverged after {iterations} iterations (max mismatch {max_mismatch:.3e})")]
    PowerFlowDiverged { iterations: usize, max_mismatch: f64 },

    /// Placement sampling could not find an observable meter set.
    #[error("no observable placement found after {attempts} attempts ({detail})")]
    Unobservable { attempts: usize, detail: String },

    /// A measurement violates the contract it is used under.
    #[error("bad measurement: {0}")]
    BadMeasurement(String),

    /// PMU angle too close to +-90 degrees for the tangent-based constraint.
    #[error("angle measurement at bus {bus} is {angle:.4} rad, outside the supported (-pi/2, pi/2) interior")]
    AngleRange { bus: usize, angle: f64 },

    /// A linear system in the estimator lost rank beyond repair.
    #[error("singular system: {0}")]
    SingularSystem(String),

    /// An input matrix violates a structural requirement (shape, symmetry,
    /// definiteness).
    #[error("bad matrix: {0}")]
    BadMatrix(String),

    /// Invalid experiment or solver configuration.
    #[error("bad configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
