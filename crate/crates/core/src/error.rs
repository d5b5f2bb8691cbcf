use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse grouping of failures, used by front-ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad input, bad configuration, or a precondition the caller broke.
    Config,
    /// No usable attack tuple survived.
    EmptyAttackSet,
    /// The oracle could not be reached or broke the wire contract.
    Oracle,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid attribute space: {0}")]
    InvalidSpace(String),

    #[error("malformed tuple{}: value `{value}`: {reason}", fmt_tuple(.tuple_id))]
    MalformedTuple {
        tuple_id: Option<String>,
        value: String,
        reason: String,
    },

    #[error("malformed score vector for tuple `{tuple_id}`, value `{value}`: {reason}")]
    MalformedScore {
        tuple_id: String,
        value: String,
        reason: String,
    },

    #[error("class id {class_id} out of range for {num_classes} classes")]
    ClassOutOfRange { class_id: usize, num_classes: usize },

    #[error("empty attack set: {0}")]
    EmptyAttackSet(String),

    #[error("unknown attribute value `{0}`")]
    UnknownValue(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("transport error after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("missing logit records for {} key(s): {}", .0.len(), fmt_keys(.0))]
    MissingRecords(Vec<(String, String)>),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("degenerate attribution sample {sample}: total attribution mass is zero")]
    DegenerateSample { sample: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("malformed mask: {0}")]
    MalformedMask(String),

    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::EmptyAttackSet(_) => ErrorClass::EmptyAttackSet,
            Error::Transport { .. } | Error::Protocol(_) | Error::MissingRecords(_) => {
                ErrorClass::Oracle
            }
            _ => ErrorClass::Config,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed_file(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::MalformedFile {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    /// Failures that only affect the rows they were raised for; the attack
    /// loop drops the owning tuples and carries on.
    pub(crate) fn is_row_local(&self) -> bool {
        matches!(
            self,
            Error::Transport { .. } | Error::MissingRecords(_) | Error::MalformedTuple { .. }
        )
    }
}

fn fmt_tuple(tuple_id: &Option<String>) -> String {
    match tuple_id {
        Some(id) => format!(" `{id}`"),
        None => String::new(),
    }
}

fn fmt_keys(keys: &[(String, String)]) -> String {
    const SHOWN: usize = 8;
    let mut out = keys
        .iter()
        .take(SHOWN)
        .map(|(t, v)| format!("({t}, {v})"))
        .collect::<Vec<_>>()
        .join(", ");
    if keys.len() > SHOWN {
        out.push_str(&format!(", ... ({} more)", keys.len() - SHOWN));
    }
    out
}
