use thiserror::Error;

/// Errors raised across the crate.
///
/// Variants carry the short machine-readable tags used in logs and CLI
/// diagnostics (`empty-union`, `malformed-alternation`, ...).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid polygon: {0}")]
    InvalidPolygon(String),
    #[error("collinear ring: polygon has zero signed area")]
    ZeroArea,
    #[error("offset {offset} out of range for {len} vertices")]
    OffsetOutOfRange { offset: usize, len: usize },
    #[error("empty-union: both polygons rasterize to nothing")]
    EmptyUnion,
    #[error("cannot delete {k} of {n} vertices (at least 3 must remain)")]
    DeleteTooMany { k: usize, n: usize },
    #[error("generation-failed: no simple polygon after {0} attempts")]
    GenerationFailed(usize),
    #[error("degenerate-after-transform: {0}")]
    DegenerateAfterTransform(String),
    #[error("coordinate ({x}, {y}) outside the {w}x{h} token grid")]
    CoordinateOutOfRange { x: i64, y: i64, w: usize, h: usize },
    #[error("malformed-alternation at token {0}")]
    MalformedAlternation(usize),
    #[error("too-few-vertices: {0} after cleanup")]
    TooFewVertices(usize),
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("sequence overflow: {len} tokens exceed capacity {max}")]
    SequenceOverflow { len: usize, max: usize },
    #[error("empty-loss: mask selects no positions")]
    EmptyLoss,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("no-ground-truth: nothing to score against")]
    NoGroundTruth,
    #[error("stage-order: {0}")]
    StageOrder(String),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
