use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An operation received operands whose shapes break its contract.
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {kind} data: {detail}")]
    Format { kind: &'static str, detail: String },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape {
        op,
        detail: detail.into(),
    })
}
