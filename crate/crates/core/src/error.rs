use thiserror::Error;

/// Errors surfaced by the toolkit.
///
/// Preconditions are validated eagerly; every violated precondition maps to a
/// dedicated variant naming what was violated.
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("measure must contain at least one atom")]
    EmptyMeasure,
    #[error("atom mass must be positive and finite, got {0}")]
    NonPositiveMass(f64),
    #[error("atom position must be finite, got {0}")]
    NonFinitePosition(f64),
    #[error("quantile level {level} outside [0, {total_mass}]")]
    QuantileOutOfRange { level: f64, total_mass: f64 },
    #[error("total masses differ: {0} vs {1}")]
    MassMismatch(f64, f64),
    #[error("piece masses sum to {got}, expected total mass {expected}")]
    MassSumMismatch { got: f64, expected: f64 },
    #[error("scaling factor must be positive and finite, got {0}")]
    NonPositiveFactor(f64),
    #[error("measure path must contain at least one snapshot")]
    EmptyPath,
    #[error("snapshot times must start at 0 and be strictly increasing")]
    BadSnapshotTimes,

    #[error("cluster list must be nonempty")]
    EmptyClusterList,
    #[error("positions and masses have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("start positions must be strictly increasing")]
    NonIncreasingPositions,
    #[error("horizon must be positive and finite, got {0}")]
    BadHorizon(f64),
    #[error("trajectory knots must span [0, horizon] with strictly increasing times")]
    BadTrajectoryKnots,
    #[error("trajectories must stay ordered: cluster {0} crosses cluster {1}")]
    TrajectoriesCross(usize, usize),
    #[error("merge tree inconsistent with {0} clusters")]
    InconsistentTree(usize),

    #[error("interval [{0}, {1}] not contained in [0, horizon]")]
    IntervalOutOfRange(f64, f64),
    #[error("interval must have positive length, got [{0}, {1}]")]
    EmptyInterval(f64, f64),

    #[error("shape time must be positive and finite, got {0}")]
    BadShapeTime(f64),
    #[error("node {index} at x={x} has value {h} below the parabola value {floor}")]
    NodeBelowParabola {
        index: usize,
        x: f64,
        h: f64,
        floor: f64,
    },
    #[error("gradient components must be nonnegative, got {0}")]
    NegativeGradient(f64),
    #[error("gradient inversion did not converge after {sweeps} sweeps (residual {residual})")]
    InversionDiverged { sweeps: usize, residual: f64 },
    #[error("back time {0} outside [0, horizon {1})")]
    BadBackTime(f64, f64),
    #[error("shape is not concave; operation requires terminal values in the concave region")]
    NotConcave,
    #[error("intermediate time {0} coincides with a merge instant (shock velocity undefined)")]
    MergeInstant(f64),

    #[error("time step must be positive and finite, got {0}")]
    BadTimeStep(f64),
    #[error("snapshot time {0} outside simulation horizon [0, {1}]")]
    SnapshotOutOfHorizon(f64, f64),
    #[error("deviation horizon {0} does not cover requested macroscopic time {1}")]
    HorizonMismatch(f64, f64),

    #[error("invalid input: {0}")]
    Invalid(String),
}

impl Error {
    /// Shorthand for free-form precondition failures.
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
