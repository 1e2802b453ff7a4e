use thiserror::Error;

/// Errors produced anywhere in the compression pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("shape error at layer `{layer}`: {msg}")]
    Shape { layer: String, msg: String },

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("malformed model{}: {msg}", layer.as_ref().map(|l| format!(" (layer `{l}`)")).unwrap_or_default())]
    Malformed { layer: Option<String>, msg: String },

    #[error("infeasible budget: flash_max {flash_max} is below the minimum achievable size {min_size}")]
    Infeasible { flash_max: i64, min_size: i64 },

    #[error("malformed table: {0}")]
    Table(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(layer: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Shape {
            layer: layer.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn malformed(layer: Option<&str>, msg: impl Into<String>) -> Self {
        Error::Malformed {
            layer: layer.map(str::to_owned),
            msg: msg.into(),
        }
    }
}
