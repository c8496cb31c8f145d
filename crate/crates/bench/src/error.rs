use std::fmt;

/// Process exit codes of the command-line tool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Converged = 0,
    NotConverged = 1,
    Rejected = 2,
    IoOrParse = 3,
}

impl ExitCode {
    pub fn code(self) -> i32 {
        self as i32
    }
}

impl fmt::Display for ExitCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },

    #[error("parse error in {location}: {message}")]
    Parse { location: String, message: String },

    /// A spec that parsed but describes an invalid problem.
    #[error("invalid problem at {field}: {message}")]
    Spec { field: String, message: String },

    #[error("{module}: {source}")]
    Core {
        module: &'static str,
        #[source]
        source: ibpd::Error,
    },
}

impl BenchError {
    pub fn io(path: impl fmt::Display, e: impl fmt::Display) -> Self {
        BenchError::Io {
            path: path.to_string(),
            message: e.to_string(),
        }
    }

    pub fn parse(location: impl fmt::Display, e: impl fmt::Display) -> Self {
        BenchError::Parse {
            location: location.to_string(),
            message: e.to_string(),
        }
    }

    pub fn spec(field: impl Into<String>, e: impl fmt::Display) -> Self {
        BenchError::Spec {
            field: field.into(),
            message: e.to_string(),
        }
    }

    pub fn core(module: &'static str, source: ibpd::Error) -> Self {
        BenchError::Core { module, source }
    }

    pub fn exit_code(&self) -> ExitCode {
        match self {
            BenchError::Io { .. } | BenchError::Parse { .. } | BenchError::Spec { .. } => ExitCode::IoOrParse,
            BenchError::Core {
                source: ibpd::Error::Divergence { .. },
                ..
            } => ExitCode::NotConverged,
            BenchError::Core { .. } => ExitCode::Rejected,
        }
    }
}

pub type Result<T> = std::result::Result<T, BenchError>;
