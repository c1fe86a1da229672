use std::path::PathBuf;

/// Errors produced by the toolflow library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("point cloud has no tool points")]
    NoToolPoints,

    /// The centered cross-covariance has rank below two, so the rotation is
    /// not determined (collinear or coincident points).
    #[error("rank-deficient cross-covariance (singular values {singular_values:?})")]
    RankDeficient { singular_values: [f64; 3] },

    /// Two singular values that enter the SVD differential are closer than
    /// the gap tolerance.
    #[error("near-degenerate SVD: singular-value gap {gap:e} below {tolerance:e}")]
    NearDegenerateSvd { gap: f64, tolerance: f64 },

    #[error("degenerate rotation representation: {0}")]
    DegenerateRepr(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("forward cache does not belong to the current network state")]
    StaleCache,

    #[error("bad configuration: {0}")]
    BadConfig(String),

    #[error("episode is over (step {step} of horizon {horizon})")]
    EpisodeOver { step: usize, horizon: usize },

    #[error("no successful demonstrations in {attempted} attempts")]
    NoSuccessfulDemos { attempted: usize },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed data: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical pipeline (as opposed to bad input
    /// files or configuration).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::RankDeficient { .. } | Error::NearDegenerateSvd { .. } | Error::DegenerateRepr(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
