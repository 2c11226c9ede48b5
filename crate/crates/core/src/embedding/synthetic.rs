//! Deterministic synthetic embeddings for tests and demos.
//!
//! Every string maps to a pseudo-random unit vector derived from a SHA-256 of
//! the seed and the string. Images can have prompts planted in them: a planted
//! image vector is `normalize(alpha * t + (1 - alpha) * noise)` where `t` is
//! the normalized sum of the planted prompts' text vectors.
//!
//! Optionally the space is made anisotropic. All text vectors then share a
//! common direction with weight `shared_text_weight`, and every image gets a
//! per-image offset along that direction drawn uniformly from
//! `[-affinity_spread, affinity_spread]`. The offset shifts the image's raw
//! similarity to every prompt at once, which positive-only scoring cannot
//! tell apart from evidence while a positive/negative contrast cancels it.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Embedding, EmbeddingBackend, EmbeddingError, ImageRef};

pub const DEFAULT_ALPHA: f64 = 0.9;

/// Planting and anisotropy settings, serializable as a plant file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantSet {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub shared_text_weight: f64,
    #[serde(default)]
    pub affinity_spread: f64,
    /// Image key (`study_id/view_id`) to the prompts planted in that image.
    #[serde(default)]
    pub plants: BTreeMap<String, BTreeSet<String>>,
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

impl Default for PlantSet {
    fn default() -> Self {
        PlantSet {
            alpha: DEFAULT_ALPHA,
            shared_text_weight: 0.0,
            affinity_spread: 0.0,
            plants: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticBackend {
    seed: u64,
    dimension: usize,
    plants: PlantSet,
}

impl SyntheticBackend {
    pub fn new(seed: u64, dimension: usize) -> Self {
        assert!(dimension > 0, "synthetic dimension must be positive");
        SyntheticBackend {
            seed,
            dimension,
            plants: PlantSet::default(),
        }
    }

    pub fn with_plants(mut self, plants: PlantSet) -> Self {
        self.plants = plants;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.plants.alpha = alpha;
        self
    }

    pub fn with_anisotropy(mut self, shared_text_weight: f64, affinity_spread: f64) -> Self {
        assert!((0.0..1.0).contains(&shared_text_weight));
        self.plants.shared_text_weight = shared_text_weight;
        self.plants.affinity_spread = affinity_spread;
        self
    }

    /// Plant `prompt` into the image with key `image_key`.
    pub fn plant(&mut self, prompt: impl Into<String>, image_key: impl Into<String>) {
        self.plants
            .plants
            .entry(image_key.into())
            .or_default()
            .insert(prompt.into());
    }

    pub fn plant_set(&self) -> &PlantSet {
        &self.plants
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn hashed_unit(&self, tag: &str, s: &str) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(tag.as_bytes());
        hasher.update([0]);
        hasher.update(s.as_bytes());
        let seed: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        let v: Vec<f64> = (0..self.dimension)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        unit(v)
    }

    fn shared_direction(&self) -> Vec<f64> {
        self.hashed_unit("shared", "")
    }

    fn text_raw(&self, prompt: &str) -> Vec<f64> {
        let base = self.hashed_unit("text", prompt);
        let w = self.plants.shared_text_weight;
        if w == 0.0 {
            return base;
        }
        let shared = self.shared_direction();
        let rest = (1.0 - w * w).sqrt();
        unit(base.iter().zip(&shared).map(|(b, c)| w * c + rest * b).collect())
    }

    fn image_raw(&self, key: &str) -> Vec<f64> {
        let noise = self.hashed_unit("image", key);
        let mut v = match self.plants.plants.get(key).filter(|p| !p.is_empty()) {
            Some(prompts) => {
                let mut sum = vec![0.0; self.dimension];
                for p in prompts {
                    for (s, t) in sum.iter_mut().zip(self.text_raw(p)) {
                        *s += t;
                    }
                }
                let dir = unit(sum);
                let a = self.plants.alpha;
                dir.iter().zip(&noise).map(|(d, n)| a * d + (1.0 - a) * n).collect()
            }
            None => noise,
        };
        let spread = self.plants.affinity_spread;
        if spread > 0.0 {
            let mut hasher = Sha256::new();
            hasher.update(self.seed.to_le_bytes());
            hasher.update(b"affinity\0");
            hasher.update(key.as_bytes());
            let mut rng = ChaCha8Rng::from_seed(hasher.finalize().into());
            let offset = rng.random_range(-spread..=spread);
            for (x, c) in v.iter_mut().zip(self.shared_direction()) {
                *x += offset * c;
            }
        }
        v
    }
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn to_embedding(v: Vec<f64>, label: &str) -> Result<Embedding, EmbeddingError> {
    Embedding::normalize(v.into_iter().map(|x| x as f32).collect(), label)
}

impl EmbeddingBackend for SyntheticBackend {
    fn dimension(&self) -> Option<usize> {
        Some(self.dimension)
    }

    fn embed_text(&self, prompt: &str) -> Result<Embedding, EmbeddingError> {
        if prompt.is_empty() {
            return Err(EmbeddingError::EmptyPrompt);
        }
        to_embedding(self.text_raw(prompt), prompt)
    }

    fn embed_image(&self, image: &ImageRef) -> Result<Embedding, EmbeddingError> {
        let key = image.key();
        to_embedding(self.image_raw(&key), &key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::ViewPosition;

    fn dot(a: &Embedding, b: &Embedding) -> f64 {
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| f64::from(*x) * f64::from(*y))
            .sum()
    }

    fn image(key: &str) -> ImageRef {
        let (s, v) = key.split_once('/').unwrap();
        ImageRef::new(s, v, key, ViewPosition::Frontal)
    }

    #[test]
    fn deterministic_per_seed() {
        let a = SyntheticBackend::new(7, 64);
        let b = SyntheticBackend::new(7, 64);
        let c = SyntheticBackend::new(8, 64);
        assert_eq!(a.embed_text("x").unwrap(), b.embed_text("x").unwrap());
        assert_ne!(a.embed_text("x").unwrap(), c.embed_text("x").unwrap());
        assert_eq!(a.embed_image(&image("s/v")).unwrap(), a.embed_image(&image("s/v")).unwrap());
    }

    #[test]
    fn vectors_are_unit_norm() {
        let b = SyntheticBackend::new(1, 512);
        for p in ["a", "air bronchograms", "There is no cavitation indicating pneumonia."] {
            let n = b.embed_text(p).unwrap().norm();
            assert!((n - 1.0).abs() < 1e-4, "{n}");
        }
    }

    #[test]
    fn planted_prompt_beats_its_negation() {
        let mut b = SyntheticBackend::new(3, 512);
        b.plant("There are air bronchograms indicating pneumonia.", "s1/v1");
        let img = b.embed_image(&image("s1/v1")).unwrap();
        let pos = b.embed_text("There are air bronchograms indicating pneumonia.").unwrap();
        let neg = b.embed_text("There are no air bronchograms indicating pneumonia.").unwrap();
        assert!(dot(&img, &pos) > dot(&img, &neg));
        assert!(dot(&img, &pos) > 0.9);
    }

    #[test]
    fn unplanted_cosines_concentrate_near_zero() {
        let b = SyntheticBackend::new(11, 512);
        let img = b.embed_image(&image("s/v")).unwrap();
        for i in 0..200 {
            let t = b.embed_text(&format!("prompt {i}")).unwrap();
            assert!(dot(&img, &t).abs() < 0.3);
        }
    }

    #[test]
    fn anisotropy_raises_text_text_similarity() {
        let b = SyntheticBackend::new(5, 512).with_anisotropy(0.6, 0.0);
        let s = dot(&b.embed_text("one").unwrap(), &b.embed_text("two").unwrap());
        assert!((s - 0.36).abs() < 0.15, "{s}");
    }

    #[test]
    fn plant_set_serializes() {
        let mut b = SyntheticBackend::new(1, 8);
        b.plant("p", "s/v");
        let json = serde_json::to_string(b.plant_set()).unwrap();
        let back: PlantSet = serde_json::from_str(&json).unwrap();
        assert_eq!(&back, b.plant_set());
        let defaults: PlantSet = serde_json::from_str("{}").unwrap();
        assert_eq!(defaults.alpha, DEFAULT_ALPHA);
    }
}
