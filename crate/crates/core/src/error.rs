use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("data integrity: {0}")]
    Integrity(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("insufficient data: need at least {required} segments, found {found}")]
    InsufficientData { required: usize, found: usize },

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("degenerate range: max equals min ({0})")]
    DegenerateRange(f64),

    #[error("type error: {0}")]
    Type(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("[{module}{}] {source}", context_suffix(.model, .metric))]
    Context {
        module: &'static str,
        model: Option<String>,
        metric: Option<String>,
        #[source]
        source: Box<Error>,
    },
}

fn context_suffix(model: &Option<String>, metric: &Option<String>) -> String {
    match (model, metric) {
        (Some(model), Some(metric)) => format!(" model={model} metric={metric}"),
        (Some(model), None) => format!(" model={model}"),
        (None, Some(metric)) => format!(" metric={metric}"),
        (None, None) => String::new(),
    }
}

/// Broad failure category; the CLI maps these onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Data,
    Config,
    Internal,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Data => 2,
            ErrorCategory::Config => 3,
            ErrorCategory::Internal => 4,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps the error with the module and (model, metric) it occurred in.
    pub fn in_module(
        self,
        module: &'static str,
        model: Option<&str>,
        metric: Option<&str>,
    ) -> Self {
        Error::Context {
            module,
            model: model.map(str::to_owned),
            metric: metric.map(str::to_owned),
            source: Box::new(self),
        }
    }

    /// The innermost error, looking through context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self.root() {
            Error::Parse { .. } | Error::Integrity(_) | Error::Io { .. } => ErrorCategory::Data,
            Error::Config(_) | Error::InvalidInput(_) => ErrorCategory::Config,
            _ => ErrorCategory::Internal,
        }
    }
}
