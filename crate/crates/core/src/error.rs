use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("loss must be a single-element tensor, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("unsupported parameter: {0}")]
    Unsupported(String),

    #[error("cluster has {got} atoms, outside the allowed range [{min}, {max}]")]
    AtomCount { got: usize, min: usize, max: usize },

    #[error("duplicate atoms {0} and {1} (zero pair distance)")]
    DuplicateAtoms(usize, usize),

    #[error("dataset spec is unsatisfiable: {0}")]
    Unsatisfiable(String),

    #[error("{n} atoms exceed Laplacian capacity {n_max}")]
    Capacity { n: usize, n_max: usize },

    #[error("degenerate output: {0}")]
    Degenerate(String),

    #[error("invalid Laplacian: {0}")]
    InvalidLaplacian(String),

    #[error("refinement produced a non-finite objective at iteration {iteration}")]
    RefineDiverged { iteration: usize, last_good: Vec<[f64; 3]> },

    #[error("invalid skip plan: {0}")]
    Plan(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("{what}:{line}: {msg}")]
    Parse { what: String, line: usize, msg: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint version {found} is newer than supported version {supported}")]
    Version { found: u32, supported: u32 },

    #[error("checkpoint is truncated or corrupt: {0}")]
    Corrupt(String),

    #[error("checkpoint profile hash {found:#018x} does not match active profile {expected:#018x}")]
    ProfileMismatch { expected: u64, found: u64 },

    #[error("stage order violated: {0}")]
    StageOrder(String),

    #[error("{0}")]
    Empty(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn parse(what: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { what: what.into(), line, msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
