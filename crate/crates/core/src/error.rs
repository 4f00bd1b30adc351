use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    /// A loss, gradient or parameter became non-finite.
    #[error("numeric error{}: {context}", layer.map(|l| format!(" at layer {l}")).unwrap_or_default())]
    Numeric { context: String, layer: Option<usize> },

    /// Packets or checkpoints that do not belong to the expected network.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {file} line {line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    #[error("target accuracy {target:.4} not reached; achieved {achieved:.4}")]
    TargetUnreached { target: f64, achieved: f64 },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(context: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
            layer: None,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Prefixes numeric errors with where they happened (round, client).
    pub fn within(self, scope: impl std::fmt::Display) -> Self {
        match self {
            Error::Numeric { context, layer } => Error::Numeric {
                context: format!("{scope}: {context}"),
                layer,
            },
            other => other,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } => 2,
            Error::Numeric { .. } | Error::TargetUnreached { .. } => 3,
            Error::Io { .. } => 4,
            Error::Protocol(_) => 2,
        }
    }
}
