use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unreadable image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("patch exceeds image: patch {patch} larger than {height}x{width}")]
    PatchExceedsImage { patch: usize, height: usize, width: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("operator arity error: {0}")]
    OperatorArity(String),

    #[error("alignment arity error: {0}")]
    AlignmentArity(String),

    #[error("alignment disabled")]
    AlignmentDisabled,

    #[error("degenerate cell: {0}")]
    DegenerateCell(String),

    #[error("pair shape error: {0}")]
    PairShape(String),

    #[error("latency lookup miss: no entry for operator `{0}`")]
    LatencyLookupMiss(String),

    #[error("unbenchmarkable operator `{name}`: {reason}")]
    Unbenchmarkable { name: String, reason: String },

    #[error("search diverged at step {step}: {state}")]
    SearchDiverged { step: usize, state: String },

    #[error("loss arity error: {0}")]
    LossArity(String),

    #[error("GP divergence: gradient penalty is not finite")]
    GpDivergence,

    #[error("training diverged at step {step}: {detail}")]
    TrainingDiverged { step: usize, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("ssim window error: image {height}x{width} smaller than the {window}x{window} window")]
    SsimWindow { height: usize, width: usize, window: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown operator `{0}`")]
    UnknownOperator(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
