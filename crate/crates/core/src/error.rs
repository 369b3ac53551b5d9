use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("charset: {0}")]
    Charset(String),

    #[error("charset hash mismatch: expected {expected}, found {found} ({context})")]
    CharsetMismatch {
        expected: String,
        found: String,
        context: String,
    },

    #[error("corpus has no usable line: missing characters {missing:?}")]
    CorpusExhausted { missing: Vec<char> },

    #[error("no font covers text {text:?} (first uncovered: {missing:?})")]
    FontCoverage { text: String, missing: Vec<char> },

    #[error("render: {0}")]
    Render(String),

    #[error("sample width {width} exceeds pad target {target}")]
    PadTooNarrow { width: usize, target: usize },

    #[error("image shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing stage dependency: {0}")]
    MissingDependency(String),

    #[error("training diverged at step {step}: {what} is not finite")]
    Diverged { step: usize, what: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("toml parse error in {path}: {message}")]
    TomlParse { path: PathBuf, message: String },

    #[error("toml serialize error: {0}")]
    TomlSer(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
