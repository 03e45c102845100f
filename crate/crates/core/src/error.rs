//! Error type shared by every stage of the pipeline.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or non-finite input data.
    #[error("data error: {0}")]
    Data(String),

    /// A caller broke a documented precondition (mismatched lengths, bad ranges).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("scene error: {0}")]
    Scene(String),

    /// An observed trajectory is not covered by the basis.
    #[error("coverage error: nearest base {index} is {distance:.4} away (epsilon {epsilon})")]
    Coverage {
        index: usize,
        distance: f64,
        epsilon: f64,
    },

    #[error("sample {index}: {source}")]
    AtSample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("infeasible: {0}")]
    Infeasible(String),

    /// CSV/JSON content that does not match the documented schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// Missing or mismatched upstream artifact.
    #[error("artifact error: {0}")]
    Artifact(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn at_sample(index: usize, source: Error) -> Self {
        Error::AtSample {
            index,
            source: Box::new(source),
        }
    }

    /// Whether the error stems from invalid user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Data(_)
            | Error::Contract(_)
            | Error::Scene(_)
            | Error::Coverage { .. }
            | Error::Infeasible(_)
            | Error::Schema(_)
            | Error::Artifact(_)
            | Error::Csv(_)
            | Error::Json(_) => true,
            Error::AtSample { source, .. } => source.is_validation(),
            Error::Divergence { .. } | Error::Solver(_) | Error::Io(_) => false,
        }
    }
}
