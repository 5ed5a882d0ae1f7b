use std::path::PathBuf;

use thiserror::Error;

use crate::model::{NodeId, ValidationReport, VarId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),

    #[error("unknown variable {0}")]
    UnknownVariable(String),

    #[error("state {state} is outside the domain of {var} (size {domain})")]
    StateOutOfDomain { var: VarId, state: usize, domain: usize },

    #[error("graph contains a directed cycle through node {0}")]
    Cycle(NodeId),

    #[error("invalid model: {0}")]
    InvalidModel(ValidationReport),

    #[error("subtree enumeration exceeds the limit of {limit}")]
    SubtreeLimit { limit: usize },

    #[error("joint domain of {count} assignments exceeds the limit of {limit}")]
    JointLimit { count: u128, limit: u128 },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("row {row} has {found} values, expected {expected}")]
    Arity { row: usize, expected: usize, found: usize },

    #[error("sample {row} has zero probability under the model")]
    ZeroProbability { row: usize },

    #[error("edge ({0}, {1}) is already part of the base tree")]
    EdgeInTree(usize, usize),

    #[error("{0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: String::new(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn with_path(self, path: &std::path::Path) -> Self {
        match self {
            Error::Parse { line, message, .. } => Error::Parse {
                path: path.display().to_string(),
                line,
                message,
            },
            other => other,
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }
}
