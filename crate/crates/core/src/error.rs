use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("point-behind-camera: depth {depth:.3e}")]
    BehindCamera { depth: f64 },
    #[error("out-of-model-domain: {0}")]
    OutOfModelDomain(String),
    #[error("non-convergence: {0}")]
    NonConvergence(String),
    #[error("insufficient-observations: {needed} needed, {got} available")]
    InsufficientObservations { needed: usize, got: usize },
    #[error("degenerate-geometry: {0}")]
    DegenerateGeometry(String),
    #[error("degenerate-configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("no-consensus: no model with at least two inliers")]
    NoConsensus,
    #[error("solver-abort: residual block {block}: {reason}")]
    SolverAbort { block: usize, reason: String },
    #[error("empty-problem: no free parameters")]
    EmptyProblem,
    #[error("rank-deficient: Hessian has a null space of dimension {null_dim}")]
    RankDeficient { null_dim: usize },
    #[error("gauge-not-fixed: problem has neither a constant block nor an anchoring residual")]
    GaugeNotFixed,
    #[error("insufficient-redundancy: group {group} has redundancy {redundancy}")]
    InsufficientRedundancy { group: String, redundancy: i64 },
    #[error("unknown-group: {0}")]
    UnknownGroup(String),
    #[error("unobservable: {0}")]
    Unobservable(String),
    #[error("imu-gap: no IMU coverage for intervals {0}")]
    ImuGap(String),
    #[error("invalid-input: {0}")]
    InvalidInput(String),
    #[error("parse-error: {file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },
    #[error("io-error: {0}")]
    Io(String),
    #[error("fusion round {round}: {source}")]
    FusionRound {
        round: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Short machine-readable prefix used in CLI diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::BehindCamera { .. } => "point-behind-camera",
            Error::OutOfModelDomain(_) => "out-of-model-domain",
            Error::NonConvergence(_) => "non-convergence",
            Error::InsufficientObservations { .. } => "insufficient-observations",
            Error::DegenerateGeometry(_) => "degenerate-geometry",
            Error::DegenerateConfiguration(_) => "degenerate-configuration",
            Error::NoConsensus => "no-consensus",
            Error::SolverAbort { .. } => "solver-abort",
            Error::EmptyProblem => "empty-problem",
            Error::RankDeficient { .. } => "rank-deficient",
            Error::GaugeNotFixed => "gauge-not-fixed",
            Error::InsufficientRedundancy { .. } => "insufficient-redundancy",
            Error::UnknownGroup(_) => "unknown-group",
            Error::Unobservable(_) => "unobservable",
            Error::ImuGap(_) => "imu-gap",
            Error::InvalidInput(_) => "invalid-input",
            Error::Parse { .. } => "parse-error",
            Error::Io(_) => "io-error",
            Error::FusionRound { source, .. } => source.kind(),
        }
    }

    /// Errors that mean the alignment problem itself is ill-posed.
    pub fn is_degenerate(&self) -> bool {
        match self {
            Error::DegenerateConfiguration(_)
            | Error::DegenerateGeometry(_)
            | Error::RankDeficient { .. }
            | Error::Unobservable(_) => true,
            Error::FusionRound { source, .. } => source.is_degenerate(),
            _ => false,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
