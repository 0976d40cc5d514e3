use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Core(#[from] layered_core::Error),

    /// A builder failed on one sample; carries the sample id.
    #[error("sample `{id}`: {source}")]
    Sample {
        id: String,
        #[source]
        source: layered_core::Error,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("insufficient inputs: {0}")]
    Insufficient(String),

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

pub(crate) trait WithId<T> {
    fn with_id(self, id: &str) -> Result<T>;
}

impl<T> WithId<T> for layered_core::Result<T> {
    fn with_id(self, id: &str) -> Result<T> {
        self.map_err(|source| DatasetError::Sample { id: id.to_string(), source })
    }
}
