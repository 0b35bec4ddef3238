use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("no local concepts exist for a {height}x{width} feature map")]
    EmptyKernelSet { height: usize, width: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("index {index} out of range (bound {bound})")]
    Index { index: usize, bound: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("loss diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: u64, step: usize },

    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("malformed {what}: {msg}")]
    Format { what: String, msg: String },

    #[error("unsupported {what} version {version}")]
    UnsupportedVersion { what: &'static str, version: u32 },

    #[error("invalid data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(what: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            msg: msg.into(),
        }
    }
}
