use std::path::PathBuf;

use crate::taxonomy::TreeViolation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A record failed to parse or validate; `line` is 1-based.
    #[error("{}:{line}: {message}", path.display())]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("category frequency 0 has no frequency group (unseen category)")]
    UnseenCategory,

    #[error("tree `{tree_id}` is invalid: {}", format_violations(.violations))]
    InvalidTree {
        tree_id: String,
        violations: Vec<TreeViolation>,
    },

    #[error("record has no parent logits for tree `{0}`")]
    MissingParentLogits(String),

    #[error("no NMS threshold defined for class {0}")]
    MissingThreshold(usize),

    #[error("class id {class_id} out of range (N = {n})")]
    ClassOutOfRange { class_id: usize, n: usize },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attaches file and line context to an error raised while handling one record.
    pub fn at_line(self, path: impl Into<PathBuf>, line: usize) -> Self {
        match self {
            e @ (Error::Io { .. } | Error::Record { .. }) => e,
            other => Error::Record {
                path: path.into(),
                line,
                message: other.to_string(),
            },
        }
    }

    /// Process exit code: 2 for I/O failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            _ => 1,
        }
    }
}

fn format_violations(v: &[TreeViolation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
