use alloc::string::String;

use crate::tensor::Shape;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs} vs {rhs}")]
    Dimension {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("empty bag: reduction over zero instances")]
    EmptyBag,
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("extractor registry: '{extractor}' expects d={expected}, found d={found}")]
    Registry {
        extractor: String,
        expected: usize,
        found: usize,
    },
    #[error("alignment error between '{left}' and '{right}': {reason}")]
    Alignment {
        left: String,
        right: String,
        reason: String,
    },
    #[error("ingestion error: {0}")]
    Ingestion(String),
    #[error("degenerate cohort: {0}")]
    DegenerateCohort(String),
    #[error("concordance undefined: no comparable pairs")]
    UndefinedMetric,
    #[error("non-finite loss at epoch {epoch}, slide '{slide}'")]
    NonFinite { epoch: usize, slide: String },
}

impl Error {
    /// True for errors caused by bad user input or configuration, as opposed
    /// to failures while running an otherwise valid job.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::NonFinite { .. } | Error::UndefinedMetric)
    }
}
