use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid rotation: {0}")]
    InvalidRotation(String),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid depth {0}: must be positive")]
    InvalidDepth(f64),
    #[error("degenerate baseline: camera centers coincide")]
    DegenerateBaseline,
    #[error("need at least {needed} frames, got {got}")]
    InsufficientFrames { needed: usize, got: usize },
    #[error("static point cloud is empty")]
    EmptyCloud,
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("schedule order violated: t = {t} must exceed t_next = {t_next}")]
    ScheduleOrder { t: f64, t_next: f64 },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("degenerate Gaussian kernel: std = {0}")]
    DegenerateKernel(f64),
    #[error("group too small: K = {0}, need at least 2")]
    GroupTooSmall(usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("deterministic trajectory cannot be used for policy optimization")]
    DeterministicTrajectory,
    #[error("missing forward cache")]
    MissingCache,
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("reward evaluation failed at coordinate {index}: {source}")]
    RewardProbe {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
