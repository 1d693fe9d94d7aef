//! Error types shared across the pipeline.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// DICOM series could not be ingested into a volume.
    #[error("ingest error: {0}")]
    Ingest(String),

    /// Malformed NIfTI or DICOM file content.
    #[error("format error: {0}")]
    Format(String),

    /// Orientation metadata missing or not a recognizable axis permutation.
    #[error("orientation error: {0}")]
    Orientation(String),

    /// Input rejected by the preprocessing stage.
    #[error("preprocess error: {0}")]
    Preprocess(String),

    /// Manifest or dataset bookkeeping violation.
    #[error("data error: {0}")]
    Data(String),

    /// Invalid model or pipeline configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Training produced a non-finite loss and was aborted.
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    TrainingDiverged { epoch: usize, loss: f64 },

    /// Metric is undefined for the given inputs (e.g. single-class AUC).
    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    /// Degenerate input to a statistical test.
    #[error("degenerate statistic: {0}")]
    StatDegenerate(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Tch(#[from] tch::TchError),

    /// A component error annotated with the case it occurred on.
    #[error("case {case_id}: {source}")]
    Case {
        case_id: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Attach a case id to an error propagating out of a per-case operation.
    pub fn for_case(self, case_id: impl Into<String>) -> Self {
        Error::Case { case_id: case_id.into(), source: Box::new(self) }
    }
}
