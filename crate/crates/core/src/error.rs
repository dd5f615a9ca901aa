use thiserror::Error;

/// Errors produced anywhere in the fitting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate design: {0}")]
    DegenerateDesign(String),

    #[error("quadrature rule construction failed: {0}")]
    RuleConstruction(String),

    #[error("newton solver failed after {iterations} iterations: {message}")]
    Solver { iterations: usize, message: String },

    #[error("null space condition violated: {0}")]
    NullSpaceCondition(String),

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("degenerate nuisance parameter: {0}")]
    DegenerateNuisance(String),

    #[error("ingestion error at row {row}: {message}")]
    Ingest { row: usize, message: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable tag used by the command-line front end.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Contract(_) => "contract",
            Error::DegenerateDesign(_) => "degenerate-design",
            Error::RuleConstruction(_) => "rule-construction",
            Error::Solver { .. } => "solver",
            Error::NullSpaceCondition(_) => "null-space-condition",
            Error::Factorization(_) => "factorization",
            Error::Numeric(_) => "numeric",
            Error::DegenerateNuisance(_) => "degenerate-nuisance",
            Error::Ingest { .. } => "ingest",
            Error::Usage(_) => "usage",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
