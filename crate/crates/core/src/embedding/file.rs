use std::path::Path;
use std::sync::Arc;

use super::{open_store, Embedding, EmbeddingBackend, EmbeddingError, EmbeddingStore, ImageRef};

/// Backend serving precomputed embeddings from store files.
///
/// Text embeddings are looked up by the exact prompt string, image embeddings
/// by `study_id/view_id`. Text and images may share one store.
#[derive(Clone, Debug)]
pub struct FileBackend {
    text: Arc<EmbeddingStore>,
    images: Arc<EmbeddingStore>,
}

impl FileBackend {
    pub fn new(text: EmbeddingStore, images: EmbeddingStore) -> Result<Self, EmbeddingError> {
        if text.dimension() != images.dimension() {
            return Err(EmbeddingError::CorruptStore(format!(
                "text store has dimension {} but image store has {}",
                text.dimension(),
                images.dimension()
            )));
        }
        Ok(FileBackend {
            text: Arc::new(text),
            images: Arc::new(images),
        })
    }

    pub fn single(store: EmbeddingStore) -> Self {
        let store = Arc::new(store);
        FileBackend {
            text: store.clone(),
            images: store,
        }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self, EmbeddingError> {
        Ok(Self::single(open_store(path)?))
    }

    pub fn open_pair(text: impl AsRef<Path>, images: impl AsRef<Path>) -> Result<Self, EmbeddingError> {
        Self::new(open_store(text)?, open_store(images)?)
    }

    /// Fail unless the stores hold vectors of `dimension` values.
    pub fn expect_dimension(self, dimension: usize) -> Result<Self, EmbeddingError> {
        let found = self.text.dimension();
        if found != dimension {
            return Err(EmbeddingError::CorruptStore(format!(
                "store dimension {found} does not match expected {dimension}"
            )));
        }
        Ok(self)
    }

    fn lookup(store: &EmbeddingStore, key: &str) -> Result<Embedding, EmbeddingError> {
        let raw = store
            .get(key)
            .ok_or_else(|| EmbeddingError::Missing(key.to_string()))?;
        Embedding::normalize(raw.to_vec(), key)
    }
}

impl EmbeddingBackend for FileBackend {
    fn dimension(&self) -> Option<usize> {
        Some(self.text.dimension())
    }

    fn embed_text(&self, prompt: &str) -> Result<Embedding, EmbeddingError> {
        if prompt.is_empty() {
            return Err(EmbeddingError::EmptyPrompt);
        }
        Self::lookup(&self.text, prompt)
    }

    fn embed_image(&self, image: &ImageRef) -> Result<Embedding, EmbeddingError> {
        Self::lookup(&self.images, &image.key())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{StoreWriter, ViewPosition};

    fn store(dim: usize, entries: &[(&str, Vec<f32>)]) -> EmbeddingStore {
        let mut w = StoreWriter::new(dim).unwrap();
        for (k, v) in entries {
            w.push(*k, v).unwrap();
        }
        EmbeddingStore::from_bytes(&w.to_bytes()).unwrap()
    }

    #[test]
    fn missing_prompt_names_the_key() {
        let backend = FileBackend::single(store(2, &[("bar", vec![1.0, 0.0])]));
        let err = backend.embed_text("foo").unwrap_err();
        assert!(matches!(&err, EmbeddingError::Missing(k) if k == "foo"));
    }

    #[test]
    fn lookups_are_normalized() {
        let backend = FileBackend::single(store(
            2,
            &[("p", vec![3.0, 4.0]), ("s1/v1", vec![0.0, 2.0])],
        ));
        assert_eq!(backend.embed_text("p").unwrap().as_slice(), &[0.6, 0.8]);
        let img = ImageRef::new("s1", "v1", "s1/v1.png", ViewPosition::Frontal);
        assert_eq!(backend.embed_image(&img).unwrap().as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn dimension_mismatch_is_a_corrupt_store() {
        let backend = FileBackend::single(store(128, &[]));
        assert!(matches!(
            backend.expect_dimension(512),
            Err(EmbeddingError::CorruptStore(_))
        ));
        assert!(matches!(
            FileBackend::new(store(4, &[]), store(8, &[])),
            Err(EmbeddingError::CorruptStore(_))
        ));
    }
}
