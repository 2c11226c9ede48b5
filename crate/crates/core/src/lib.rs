//! Zero-shot multi-label chest X-ray diagnosis from descriptor prompts.
//!
//! Each pathology is described by a handful of visual observations. An image
//! is scored against a positive and a negative prompt per observation, the
//! per-observation probabilities are pooled into a pathology score, and the
//! scores of several views are combined into a study prediction.

pub mod ablation;
pub mod catalog;
pub mod embedding;
pub mod eval;
pub mod fixture;
pub mod inference;
pub mod nb;

use thiserror::Error;

pub use catalog::{load_catalog, Catalog, CatalogError, Descriptor, Pathology, PromptError, PromptStyle};
pub use embedding::{Embedding, EmbeddingBackend, EmbeddingError, ImageRef, ViewPosition};
pub use eval::{auroc, load_label_table, EvalError, EvalReport, LabelTable};
pub use inference::{
    contrastive_probability, pool_pathology_score, AggregationMode, Diagnoser, InferenceConfig,
    InferenceError, NoFindingRule, StudyPrediction,
};
pub use nb::{FeatureSet, GaussianNb, NbError, NbModel};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Nb(#[from] NbError),
}

impl From<nb::NbEvalError> for Error {
    fn from(e: nb::NbEvalError) -> Self {
        match e {
            nb::NbEvalError::Model(e) => Error::Nb(e),
            nb::NbEvalError::Eval(e) => Error::Eval(e),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    /// Malformed or missing input.
    Input,
    /// Inputs that are individually valid but disagree with each other.
    Consistency,
    /// Failure talking to a remote embedding service.
    Transport,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Input => 2,
            ErrorKind::Consistency => 3,
            ErrorKind::Transport => 4,
        }
    }
}

fn embedding_kind(e: &EmbeddingError) -> ErrorKind {
    match e {
        EmbeddingError::Transport(_) | EmbeddingError::Service { .. } => ErrorKind::Transport,
        EmbeddingError::Missing(_) | EmbeddingError::DimensionMismatch { .. } => ErrorKind::Consistency,
        _ => ErrorKind::Input,
    }
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Catalog(_) | Error::Prompt(_) => ErrorKind::Input,
            Error::Embedding(e) => embedding_kind(e),
            Error::Inference(e) => match e {
                InferenceError::Embedding(e) => embedding_kind(e),
                InferenceError::InvalidTemperature(_) | InferenceError::NoImages => ErrorKind::Input,
                _ => ErrorKind::Consistency,
            },
            Error::Eval(e) => match e {
                EvalError::MissingPredictions(_) | EvalError::LengthMismatch(..) => ErrorKind::Consistency,
                _ => ErrorKind::Input,
            },
            Error::Nb(e) => match e {
                NbError::FingerprintMismatch { .. }
                | NbError::FeatureCount { .. }
                | NbError::MissingFeature { .. }
                | NbError::UnknownPathology(_)
                | NbError::SingleClass => ErrorKind::Consistency,
                _ => ErrorKind::Input,
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind().exit_code()
    }
}
