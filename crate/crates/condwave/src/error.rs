use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("field shape {found:?} does not match grid shape {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("point ({x1}, {x2}) outside box domain on axis {axis}")]
    OutOfDomain { x1: f64, x2: f64, axis: usize },

    #[error("field vanishes everywhere; no reference amplitude")]
    ZeroField,

    #[error("velocity evaluation inside node neighborhood at ({x1}, {x2}): |psi| = {amp:.3e} < {floor:.3e}")]
    NodeProximity { x1: f64, x2: f64, amp: f64, floor: f64 },

    #[error("masked value requested at index ({0}, {1})")]
    Masked(usize, usize),

    #[error("eigensolve failed: {0}")]
    Eigensolve(String),

    #[error("trajectory does not cover t = {t}; recorded range [{t0}, {t1}]")]
    TrajectoryRange { t: f64, t0: f64, t1: f64 },

    #[error("step size control failed: per-step error {err:.3e} above {tol:.3e} at depth limit")]
    StepControl { err: f64, tol: f64 },

    #[error("non-finite value produced during {0}")]
    NonFinite(&'static str),

    #[error("conditional analysis: {0}")]
    Conditional(String),

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Serialize(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable class name, paired with [`Error::exit_code`]
    /// in the error records the CLI emits.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Config { .. } => "config",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::InvalidGrid(_) => "invalid_grid",
            Error::OutOfDomain { .. } => "out_of_domain",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::Eigensolve(_) => "eigensolve",
            Error::NodeProximity { .. } => "node_proximity",
            Error::StepControl { .. } => "step_control",
            Error::TrajectoryRange { .. } => "trajectory_range",
            Error::NonFinite(_) => "non_finite",
            Error::Conditional(_) => "conditional",
            Error::Masked(..) => "masked",
            Error::ZeroField => "zero_field",
            Error::Io(_) => "io",
            Error::Serialize(_) => "serialize",
            Error::Csv(_) => "csv",
        }
    }

    /// Stable process exit code per error class, for scripted callers.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::InvalidArgument(_) => 2,
            Error::InvalidGrid(_) | Error::OutOfDomain { .. } | Error::ShapeMismatch { .. } => 3,
            Error::Eigensolve(_) => 4,
            Error::NodeProximity { .. }
            | Error::StepControl { .. }
            | Error::TrajectoryRange { .. }
            | Error::NonFinite(_) => 5,
            Error::Conditional(_) | Error::Masked(..) | Error::ZeroField => 6,
            Error::Io(_) | Error::Serialize(_) | Error::Csv(_) => 7,
        }
    }
}
