use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("vertex {vertex} has an undefined normal")]
    UndefinedNormal { vertex: usize },

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate blended transform (det = {det:e})")]
    DegenerateBlend { det: f64 },

    #[error("non-finite residual at the initial point")]
    NonFiniteResidual,

    #[error("normal equations are singular even with damping {damping:e}")]
    SingularSystem { damping: f64 },

    #[error("vertex {vertex} has zero weight to every cluster")]
    Unsupported { vertex: usize },

    #[error("no node has a direct motion for frame {frame}")]
    NoDirectMotion { frame: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("sequence has {frames} frames, more than the maximum of {max}")]
    TooManyFrames { frames: usize, max: usize },

    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("pipeline stage `{stage}` failed: {message}")]
    Stage { stage: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
