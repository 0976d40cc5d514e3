use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("attention row {row} has every column blocked")]
    DegenerateRow { row: usize },

    #[error("degenerate quad: homography system is singular")]
    DegenerateQuad,

    #[error("layer `{0}` is placed entirely outside the canvas")]
    LayerOutOfBounds(String),

    #[error("more than one visible spatial layer ({0} found)")]
    MultipleSpatialLayers(usize),

    #[error("extractor registry is empty")]
    EmptyRegistry,

    #[error("image too small: {0}")]
    TooSmall(String),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn shape_mismatch(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Error {
    Error::ShapeMismatch {
        expected: format!("{expected:?}"),
        actual: format!("{actual:?}"),
    }
}
