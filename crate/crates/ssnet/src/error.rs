use std::path::PathBuf;

/// Errors from file formats, configuration and the drivers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] ssnet_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// A file exists but its contents are not what the reader expects.
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    /// A configuration file or option is invalid.
    #[error("config: {0}")]
    Config(String),
    /// The loss or a gradient became NaN or infinite.
    #[error("training diverged in epoch {epoch}: {msg}")]
    Diverged { epoch: usize, msg: String },
    #[error("CSV output: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

pub(crate) fn format_err(path: impl Into<PathBuf>, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.into(),
        msg: msg.into(),
    }
}
