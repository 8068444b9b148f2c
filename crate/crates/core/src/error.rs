use thiserror::Error;

/// Errors raised by estimation, sampling and evaluation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("step size too large: tau * eta = {product} (must be < 1)")]
    StepSize { product: f64 },

    #[error("nu diverged: exp({value}) overflows")]
    NuDivergence { value: f64 },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("linear solve failed: {0}")]
    Solver(String),

    #[error("resource guard exceeded: {0}")]
    ResourceGuard(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("rejection envelope too loose: acceptance rate {rate:.2e}")]
    Envelope { rate: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    /// True for failures caused by numerical breakdown during a computation.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NuDivergence { .. }
                | Error::NonFinite { .. }
                | Error::Solver(_)
                | Error::StepSize { .. }
                | Error::Envelope { .. }
                | Error::DegenerateData(_)
        )
    }

    pub fn is_resource(&self) -> bool {
        matches!(self, Error::ResourceGuard(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
