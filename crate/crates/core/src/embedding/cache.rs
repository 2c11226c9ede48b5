use std::collections::HashMap;
use std::sync::RwLock;

use super::{Embedding, EmbeddingBackend, EmbeddingError, ImageRef};

/// Memoizes another backend by exact prompt string and image key.
///
/// Concurrent misses on the same key may both reach the inner backend; the
/// values are identical and the last insert wins.
pub struct CachedBackend<B> {
    inner: B,
    text: RwLock<HashMap<String, Embedding>>,
    images: RwLock<HashMap<String, Embedding>>,
}

impl<B: EmbeddingBackend> CachedBackend<B> {
    pub fn new(inner: B) -> Self {
        CachedBackend {
            inner,
            text: RwLock::new(HashMap::new()),
            images: RwLock::new(HashMap::new()),
        }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn cached_texts(&self) -> usize {
        self.text.read().unwrap().len()
    }

    pub fn cached_images(&self) -> usize {
        self.images.read().unwrap().len()
    }
}

fn fill<K, F>(
    cache: &RwLock<HashMap<String, Embedding>>,
    keys: &[K],
    key_of: impl Fn(&K) -> String,
    fetch: F,
) -> Result<Vec<Embedding>, EmbeddingError>
where
    F: FnOnce(&[&K]) -> Result<Vec<Embedding>, EmbeddingError>,
{
    let names: Vec<String> = keys.iter().map(&key_of).collect();
    let mut missing: Vec<&K> = Vec::new();
    {
        let map = cache.read().unwrap();
        let mut queued = std::collections::HashSet::new();
        for (k, name) in keys.iter().zip(&names) {
            if !map.contains_key(name) && queued.insert(name.as_str()) {
                missing.push(k);
            }
        }
    }
    if !missing.is_empty() {
        let fetched = fetch(&missing)?;
        let mut map = cache.write().unwrap();
        for (k, e) in missing.iter().zip(fetched) {
            map.insert(key_of(k), e);
        }
    }
    let map = cache.read().unwrap();
    Ok(names.iter().map(|n| map[n].clone()).collect())
}

impl<B: EmbeddingBackend> EmbeddingBackend for CachedBackend<B> {
    fn dimension(&self) -> Option<usize> {
        self.inner.dimension()
    }

    fn embed_text(&self, prompt: &str) -> Result<Embedding, EmbeddingError> {
        Ok(self.embed_texts(&[prompt])?.remove(0))
    }

    fn embed_image(&self, image: &ImageRef) -> Result<Embedding, EmbeddingError> {
        Ok(self.embed_images(&[image])?.remove(0))
    }

    fn embed_texts(&self, prompts: &[&str]) -> Result<Vec<Embedding>, EmbeddingError> {
        fill(&self.text, prompts, |p| p.to_string(), |missing| {
            let batch: Vec<&str> = missing.iter().map(|p| **p).collect();
            self.inner.embed_texts(&batch)
        })
    }

    fn embed_images(&self, images: &[&ImageRef]) -> Result<Vec<Embedding>, EmbeddingError> {
        fill(&self.images, images, |i| i.key(), |missing| {
            let batch: Vec<&ImageRef> = missing.iter().map(|i| **i).collect();
            self.inner.embed_images(&batch)
        })
    }
}
