use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value in {op}")]
    Numeric { op: &'static str },

    #[error("index {index} out of range for {len} rows")]
    Index { index: usize, len: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("degenerate cloud{}: all points coincide or fewer than two points", source_suffix(.source_id))]
    DegenerateCloud { source_id: String },

    #[error("cannot sample {requested} centers from {available} points")]
    SampleSize { requested: usize, available: usize },

    #[error("grouping error: {0}")]
    Grouping(String),

    #[error("neighborhood too large: k={k} but only {available} other centers")]
    NeighborhoodTooLarge { k: usize, available: usize },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("schedule error: epoch {t} beyond total {total}")]
    Schedule { t: usize, total: usize },

    #[error("optimizer error: {0}")]
    Optimizer(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error in {}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn source_suffix(id: &str) -> String {
    if id.is_empty() {
        String::new()
    } else {
        format!(" in {id}")
    }
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short machine-readable tag of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Numeric { .. } => "numeric",
            Error::Index { .. } => "index",
            Error::Contract(_) => "contract",
            Error::Oracle(_) => "oracle",
            Error::DegenerateCloud { .. } => "degenerate_cloud",
            Error::SampleSize { .. } => "sample_size",
            Error::Grouping(_) => "grouping",
            Error::NeighborhoodTooLarge { .. } => "neighborhood_too_large",
            Error::Graph(_) => "graph",
            Error::Config(_) => "config",
            Error::Label { .. } => "label",
            Error::Schedule { .. } => "schedule",
            Error::Optimizer(_) => "optimizer",
            Error::Data(_) => "data",
            Error::Parse { .. } => "parse",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
        }
    }
}
