use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,
    #[error("row width {got} does not match model width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid feature matrix: {0}")]
    InvalidMatrix(String),
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error("positivity violated: {0}")]
    PositivityViolation(String),
    #[error("no model supplied for site {0}")]
    MissingModel(usize),
    #[error("ensemble model does not match the augmented dataset: {0}")]
    ModelDataMismatch(String),
    #[error("subsample of {m} rows is below twice the minimum leaf size {min_leaf}")]
    SubsampleTooSmall { m: usize, min_leaf: usize },
    #[error("no subject's observed treatment agrees with the decision rule")]
    NoConsistentSubjects,
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("model digest mismatch: recorded {recorded}, computed {computed}")]
    DigestMismatch { recorded: String, computed: String },
    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u32),
    #[error("model schema error: {0}")]
    SchemaError(String),
    #[error("{estimator} failed (site {site:?}, replicate {replicate}): {source}")]
    Fit {
        estimator: String,
        site: Option<usize>,
        replicate: u64,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn fit(estimator: &str, site: Option<usize>, replicate: u64, source: Error) -> Self {
        Error::Fit {
            estimator: estimator.to_string(),
            site,
            replicate,
            source: Box::new(source),
        }
    }
}
