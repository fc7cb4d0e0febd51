use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate density: {0}")]
    DegenerateDensity(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("kernel requires a covariate but none was supplied")]
    MissingCovariate,

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("observation outside model support: x = {x}")]
    OutsideSupport { x: f64 },

    #[error("step {index}: {source}")]
    Step {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("no tractable conditional for process kind `{0}`")]
    NoTractableConditional(String),

    #[error("too few points: need at least {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("non-finite objective: {0}")]
    NonFiniteObjective(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("unknown example `{given}`; valid ids: {valid}")]
    UnknownExample { given: String, valid: String },

    #[error("stage `{stage}` failed for seed {seed}: {source}")]
    Stage {
        stage: String,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error in {what}: {msg}")]
    Parse { what: String, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures that arise while computing (as opposed to bad input
    /// or configuration). The CLI maps these to a distinct exit code.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::DegenerateDensity(_)
            | Error::OutsideSupport { .. }
            | Error::NonFiniteObjective(_)
            | Error::Numerical(_) => true,
            Error::Step { source, .. } | Error::Stage { source, .. } => source.is_numeric(),
            _ => false,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(what: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Parse {
            what: what.into(),
            msg: msg.into(),
        }
    }
}
