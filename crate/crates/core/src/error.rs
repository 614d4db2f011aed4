use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A numeric argument fell outside the domain of the function evaluated.
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration value is invalid or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A non-finite value appeared where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An index was out of range for the table it addresses.
    #[error("index out of range: {0}")]
    Index(String),

    /// A preference pair had identical responses.
    #[error("invalid pair: responses {0} and {0} are identical")]
    InvalidPair(usize),

    /// The bonus design produced `u <= alpha` (or `u <= 0`) at some cell.
    #[error("design violation at prompt {x}, response {y}: u = {u} must exceed {bound}")]
    DesignViolation {
        x: usize,
        y: usize,
        u: f64,
        bound: f64,
    },

    /// An estimator was asked to average over an empty dataset.
    #[error("estimator error: {0}")]
    Estimator(String),

    /// A finite-difference step left the admissible region.
    #[error("step-size error: {0}")]
    StepSize(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Whether the error stems from the user's configuration.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Toml(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
