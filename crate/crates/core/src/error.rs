use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] lesion_tensor::Error),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// A file exists but cannot be decoded.
    #[error("cannot load {path}: {detail}")]
    Load { path: PathBuf, detail: String },
    /// A prerequisite artifact (checkpoint, manifest) is absent.
    #[error("missing artifact {path}: {what}")]
    MissingArtifact { path: PathBuf, what: String },
    #[error("sampler diverged at step {step} (t = {t}): non-finite latent")]
    SamplerDiverged { step: usize, t: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
