use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON at line {line}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    /// A record parsed but violates a type invariant.
    #[error("{message} at line {line}")]
    Invalid { line: usize, message: String },

    #[error("invalid {field}: {message}")]
    Field { field: String, message: String },

    #[error("unalignable span: chars [{start},{end}) do not map onto page words")]
    UnalignableSpan { start: usize, end: usize },

    #[error("layout template {0} has no slots")]
    EmptyTemplate(String),

    #[error("prompt exceeds budget: {prompt_tokens} prompt tokens leave no room under max-seq {max_seq}")]
    PromptTooLong { prompt_tokens: usize, max_seq: usize },

    #[error("invalid logits: {0}")]
    Logits(String),

    #[error("no label sequence satisfies the transition constraints")]
    NoValidSequence,

    #[error("brute-force decode limited to {limit} tokens, got {got}")]
    EnumerationGuard { limit: usize, got: usize },

    #[error("qa {qa_id}: missing windows {missing:?}")]
    MissingWindows { qa_id: String, missing: Vec<usize> },

    #[error("generation input needs 1 to 3 spans, got {0}")]
    SpanCount(usize),

    #[error("generation failed for qa {qa_id}: {message}")]
    Generation { qa_id: String, message: String },

    #[error("unknown reference: {0}")]
    UnknownReference(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Field {
            field: field.into(),
            message: message.into(),
        }
    }
}
