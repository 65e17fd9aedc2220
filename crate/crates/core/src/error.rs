use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("point lies behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("point lies on the camera plane (|depth| {depth} below 1e-9)")]
    NearPlane { depth: f64 },
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("backward requires a 1x1 root, got {0:?}")]
    NonScalarRoot((usize, usize)),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("pedestrian {id}: frames not strictly increasing at line {line}")]
    NonMonotoneFrames { id: u64, line: usize },
    #[error("empty scene")]
    EmptyScene,
    #[error("unknown pedestrian id {0}")]
    UnknownPedestrian(u64),
    #[error("observer {0} is tracked for fewer than 2 frames")]
    ShortObserverTrack(u64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no overlapping visible frames between estimate and ground truth")]
    EmptyIntersection,
    #[error("no visible pedestrians in frame {0}")]
    NoVisiblePedestrians(usize),
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
