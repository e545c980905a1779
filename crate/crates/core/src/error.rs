use std::path::PathBuf;

/// Failure modes shared by every module of the simulator.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("rank-deficient matrix (condition estimate {0:.3e})")]
    RankDeficient(f64),
    #[error("null space is degenerate: combiner lies in the interferer span")]
    DegenerateNullSpace,
    #[error("queue is unstable at load {0:.4} (must be below 1)")]
    UnstableQueue(f64),
    #[error("zero link capacity: payload can never be delivered")]
    ZeroCapacity,
    #[error("no samples")]
    NoData,
    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Config(Vec<String>),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
