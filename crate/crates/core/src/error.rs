use std::io;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    /// Malformed `<DOC>` block in a TREC corpus.
    #[error("TREC corpus, byte offset {offset}: {message}")]
    Trec { offset: u64, message: String },

    /// Line-oriented parse failure (CSV, qrels, run files, query files, configs).
    #[error("{source_name}, line {line}: {message}")]
    Line {
        source_name: String,
        line: usize,
        message: String,
    },

    /// Binary model or embedding file that does not match its format.
    #[error("{format} file: {message}")]
    Format {
        format: &'static str,
        message: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("training diverged (non-finite loss) at epoch {epoch}{}", batch.map(|b| format!(", batch {b}")).unwrap_or_default())]
    Divergence { epoch: usize, batch: Option<usize> },

    #[error("config error: {0}")]
    Config(String),

    #[error("stale checkpoint for stage `{stage}`: inputs or configuration changed (rerun with --force)")]
    StaleCheckpoint { stage: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn line(source_name: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Line {
            source_name: source_name.into(),
            line,
            message: msg.into(),
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }

    /// Whether the error indicates a bug or numerical failure rather than bad input data.
    pub fn is_internal(&self) -> bool {
        match self {
            Error::Divergence { .. } => true,
            Error::Stage { source, .. } => source.is_internal(),
            _ => false,
        }
    }
}
