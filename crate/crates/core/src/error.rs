use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index out of range: {what} {index} >= {bound}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("duplicate entry ({user}, {item})")]
    DuplicateEntry { user: usize, item: usize },

    #[error("invalid weight {weight} for entry ({user}, {item}); weights must lie in [0, 1]")]
    InvalidWeight { user: usize, item: usize, weight: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid split: {0}")]
    Split(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("zero degree for observed pair ({user}, {item})")]
    Degree { user: usize, item: usize },

    #[error("pseudo entry ({user}, {item}) overlaps an observed entry")]
    Disjointness { user: usize, item: usize },

    #[error("correlation undefined: {0}")]
    CorrelationUndefined(&'static str),

    #[error("degenerate blend: zero variance at alpha = {alpha}")]
    DegenerateBlend { alpha: f64 },

    #[error("singular correlation: |rho| = 1")]
    SingularCorrelation,

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing artifact {path} (produce it with `dualcf {producer}`)")]
    MissingArtifact { path: PathBuf, producer: &'static str },

    #[error("bad artifact {path}: {msg}")]
    Artifact { path: PathBuf, msg: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("verification failed: {0}")]
    Verification(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the command-line front end:
    /// 1 config, 2 data, 3 numeric, 4 verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Precondition(_) => 1,
            Error::Numeric(_)
            | Error::DegenerateBlend { .. }
            | Error::SingularCorrelation
            | Error::CorrelationUndefined(_) => 3,
            Error::Verification(_) => 4,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 2,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Error {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }
}
