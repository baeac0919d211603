use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, sizes, ranges).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A computation produced NaN or infinity.
    #[error("numeric error in {op}: {detail}")]
    Numeric { op: String, detail: String },

    /// The quadratic program did not reach the requested tolerance.
    #[error("solver failure after {iterations} iterations: residual {residual:e}, best alpha {best_alpha:?}")]
    Solver {
        iterations: usize,
        residual: f64,
        best_alpha: Vec<f64>,
    },

    /// The reduced KKT system could not be solved during implicit differentiation.
    #[error("differentiation failure: {0}")]
    Differentiation(String),

    /// Invalid configuration or dataset shape.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed binary or text input.
    #[error("parse error at byte {offset}: {detail}")]
    Parse { offset: usize, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn numeric(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op: op.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn parse(offset: usize, detail: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors produced by the numerical core (solver, NaN, singular systems).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Numeric { .. } | Error::Solver { .. } | Error::Differentiation(_)
        )
    }

    /// True for errors caused by input data or files.
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. } | Error::Io { .. } | Error::Config(_)
        )
    }
}
