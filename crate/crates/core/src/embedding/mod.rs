//! Text and image embeddings from interchangeable providers.

mod cache;
mod file;
mod http;
pub mod store;
mod synthetic;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::CachedBackend;
pub use file::FileBackend;
pub use http::HttpBackend;
pub use store::{open_store, write_store, EmbeddingStore, StoreWriter};
pub use synthetic::{PlantSet, SyntheticBackend, DEFAULT_ALPHA};

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("no embedding stored for {0:?}")]
    Missing(String),
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("embedding for {0:?} has zero norm")]
    ZeroNorm(String),
    #[error("non-finite value in embedding for {0:?}")]
    NonFinite(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("corrupt embedding store: {0}")]
    CorruptStore(String),
    #[error("embedding store format error: {0}")]
    Format(String),
    #[error("duplicate key {0:?}")]
    DuplicateKey(String),
    #[error("embedding service transport error: {0}")]
    Transport(String),
    #[error("embedding service returned status {status}: {message}")]
    Service { status: u16, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl EmbeddingError {
    /// Whether the error came from talking to a remote service.
    pub fn is_transport(&self) -> bool {
        matches!(self, EmbeddingError::Transport(_) | EmbeddingError::Service { .. })
    }
}

/// Unit-norm embedding vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    /// Scale `values` to unit L2 norm. `label` names the vector in errors.
    pub fn normalize(values: Vec<f32>, label: &str) -> Result<Self, EmbeddingError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite(label.to_string()));
        }
        let norm = values
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(EmbeddingError::ZeroNorm(label.to_string()));
        }
        Ok(Embedding(
            values
                .into_iter()
                .map(|v| (f64::from(v) / norm) as f32)
                .collect(),
        ))
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewPosition {
    #[default]
    Frontal,
    Lateral,
}

impl ViewPosition {
    /// Infer the view from a path; undeclared views count as frontal.
    pub fn from_path(path: &str) -> Self {
        let lower = path.to_ascii_lowercase();
        if lower.contains("lateral") {
            ViewPosition::Lateral
        } else {
            ViewPosition::Frontal
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub study_id: String,
    pub view_id: String,
    /// File path or dataset-relative path of the image.
    pub source: String,
    #[serde(default)]
    pub view: ViewPosition,
}

impl ImageRef {
    pub fn new(
        study_id: impl Into<String>,
        view_id: impl Into<String>,
        source: impl Into<String>,
        view: ViewPosition,
    ) -> Self {
        ImageRef {
            study_id: study_id.into(),
            view_id: view_id.into(),
            source: source.into(),
            view,
        }
    }

    /// Build a reference from a dataset path like
    /// `CheXpert-v1.0/valid/patient64541/study1/view1_frontal.jpg`: the study
    /// id is the last two parent directories, the view id the file stem.
    pub fn from_path(path: &str) -> Self {
        let p = Path::new(path);
        let view_id = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.to_string());
        let parents: Vec<String> = p
            .parent()
            .map(|parent| {
                parent
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy().into_owned())
                    .filter(|c| !c.is_empty() && c != "." && c != "/")
                    .collect()
            })
            .unwrap_or_default();
        let study_id = match parents.len() {
            0 => view_id.clone(),
            1 => parents[0].clone(),
            n => format!("{}/{}", parents[n - 2], parents[n - 1]),
        };
        ImageRef {
            study_id,
            view_id,
            source: path.to_string(),
            view: ViewPosition::from_path(path),
        }
    }

    /// Store key: `study_id/view_id`.
    pub fn key(&self) -> String {
        format!("{}/{}", self.study_id, self.view_id)
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.study_id, self.view_id)
    }
}

/// A provider of text and image embeddings in a shared space.
///
/// Implementations return unit-norm vectors of a constant dimension and must
/// be deterministic for a given input.
pub trait EmbeddingBackend: Send + Sync {
    /// Declared dimension, if known before the first request.
    fn dimension(&self) -> Option<usize>;

    fn embed_text(&self, prompt: &str) -> Result<Embedding, EmbeddingError>;

    fn embed_image(&self, image: &ImageRef) -> Result<Embedding, EmbeddingError>;

    fn embed_texts(&self, prompts: &[&str]) -> Result<Vec<Embedding>, EmbeddingError> {
        prompts.iter().map(|p| self.embed_text(p)).collect()
    }

    fn embed_images(&self, images: &[&ImageRef]) -> Result<Vec<Embedding>, EmbeddingError> {
        images.iter().map(|i| self.embed_image(i)).collect()
    }
}

impl<B: EmbeddingBackend + ?Sized> EmbeddingBackend for &B {
    fn dimension(&self) -> Option<usize> {
        (**self).dimension()
    }
    fn embed_text(&self, prompt: &str) -> Result<Embedding, EmbeddingError> {
        (**self).embed_text(prompt)
    }
    fn embed_image(&self, image: &ImageRef) -> Result<Embedding, EmbeddingError> {
        (**self).embed_image(image)
    }
    fn embed_texts(&self, prompts: &[&str]) -> Result<Vec<Embedding>, EmbeddingError> {
        (**self).embed_texts(prompts)
    }
    fn embed_images(&self, images: &[&ImageRef]) -> Result<Vec<Embedding>, EmbeddingError> {
        (**self).embed_images(images)
    }
}

impl<B: EmbeddingBackend + ?Sized> EmbeddingBackend for Box<B> {
    fn dimension(&self) -> Option<usize> {
        (**self).dimension()
    }
    fn embed_text(&self, prompt: &str) -> Result<Embedding, EmbeddingError> {
        (**self).embed_text(prompt)
    }
    fn embed_image(&self, image: &ImageRef) -> Result<Embedding, EmbeddingError> {
        (**self).embed_image(image)
    }
    fn embed_texts(&self, prompts: &[&str]) -> Result<Vec<Embedding>, EmbeddingError> {
        (**self).embed_texts(prompts)
    }
    fn embed_images(&self, images: &[&ImageRef]) -> Result<Vec<Embedding>, EmbeddingError> {
        (**self).embed_images(images)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_yields_unit_norm() {
        let e = Embedding::normalize(vec![3.0, 4.0], "v").unwrap();
        assert_eq!(e.as_slice(), &[0.6, 0.8]);
        assert!((e.norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn normalize_rejects_degenerate_input() {
        assert!(matches!(
            Embedding::normalize(vec![0.0, 0.0], "z"),
            Err(EmbeddingError::ZeroNorm(_))
        ));
        assert!(matches!(
            Embedding::normalize(vec![f32::NAN, 1.0], "n"),
            Err(EmbeddingError::NonFinite(_))
        ));
    }

    #[test]
    fn image_ref_from_chexpert_path() {
        let r = ImageRef::from_path("CheXpert-v1.0/valid/patient64541/study1/view1_frontal.jpg");
        assert_eq!(r.study_id, "patient64541/study1");
        assert_eq!(r.view_id, "view1_frontal");
        assert_eq!(r.view, ViewPosition::Frontal);
        assert_eq!(r.key(), "patient64541/study1/view1_frontal");

        let lat = ImageRef::from_path("valid/patient1/study2/view2_lateral.jpg");
        assert_eq!(lat.view, ViewPosition::Lateral);

        let bare = ImageRef::from_path("scan.png");
        assert_eq!(bare.study_id, "scan");
        assert_eq!(bare.view, ViewPosition::Frontal);
    }
}
