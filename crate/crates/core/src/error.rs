use thiserror::Error;

/// Errors produced by the calibration library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalibError {
    #[error("vectors are not orthonormal (deviation {0:.3e})")]
    NotOrthonormal(f64),
    #[error("degenerate observation: {0}")]
    DegenerateObservation(String),
    #[error("normal {index} is not unit length (norm {norm})")]
    NonUnitNormal { index: usize, norm: f64 },
    #[error("plane distance {name} must be positive, got {value}")]
    NonPositiveDistance { name: &'static str, value: f64 },
    #[error("normal gram matrix is not positive definite")]
    SingularNormalGram,
    #[error("reduction is singular (condition number {0:.3e})")]
    SingularReduction(f64),
    #[error("resultant evaluation degenerate: {0}")]
    ResultantDegenerate(String),
    #[error("polynomial is identically zero")]
    ZeroPolynomial,
    #[error("no admissible root")]
    NoRoot,
    #[error("no real rotation candidates")]
    NoCandidates,
    #[error("invalid seed: {0}")]
    InvalidSeed(String),
    #[error("no candidate passes the cheirality check")]
    NoPhysicalSolution,
    #[error("observation {0} has no scan segments")]
    MissingSegments(usize),
    #[error("insufficient observations: need {needed}, got {got}")]
    InsufficientObservations { needed: usize, got: usize },
    #[error("no consensus set found")]
    NoConsensus,
    #[error("too few points: need {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("points are degenerate (coincident)")]
    DegeneratePoints,
    #[error("lines are nearly parallel (|sin| = {0:.3e})")]
    NearParallel(f64),
    #[error("expected 4 scan segments, found {0}")]
    WrongSegmentCount(usize),
    #[error("scan is not a convex V profile")]
    NonConvexScan,
    #[error("pencil fit is ill-conditioned")]
    IllConditioned,
    #[error("intrinsic matrix is singular")]
    SingularIntrinsics,
    #[error("scan plane does not intersect side {0}")]
    NoIntersection(&'static str),
    #[error("target is behind the camera")]
    TargetBehindCamera,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("unsupported schema version {0}")]
    UnsupportedSchema(u32),
}

pub type Result<T> = std::result::Result<T, CalibError>;
