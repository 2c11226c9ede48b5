use std::sync::OnceLock;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Embedding, EmbeddingBackend, EmbeddingError, ImageRef};

#[derive(Serialize)]
struct EmbedRequest<'a> {
    kind: &'a str,
    items: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    dimension: usize,
    embeddings: Vec<Vec<f32>>,
}

#[derive(Deserialize)]
struct ErrorBody {
    error: String,
}

/// Client for a remote `POST /v1/embed` service.
///
/// Text items are prompt strings; image items are the image source paths.
/// The dimension is fixed by the first response unless declared up front.
pub struct HttpBackend {
    endpoint: String,
    agent: ureq::Agent,
    dimension: OnceLock<usize>,
}

impl HttpBackend {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

    pub fn new(base_url: &str) -> Self {
        Self::with_timeout(base_url, Self::DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(base_url: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpBackend {
            endpoint: format!("{}/v1/embed", base_url.trim_end_matches('/')),
            agent,
            dimension: OnceLock::new(),
        }
    }

    pub fn with_dimension(self, dimension: usize) -> Self {
        let _ = self.dimension.set(dimension);
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn request(&self, kind: &str, items: &[&str], labels: &[String]) -> Result<Vec<Embedding>, EmbeddingError> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let mut response = self
            .agent
            .post(&self.endpoint)
            .send_json(EmbedRequest { kind, items })
            .map_err(|e| EmbeddingError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        if status >= 400 {
            let body = response.body_mut().read_to_string().unwrap_or_default();
            let message = serde_json::from_str::<ErrorBody>(&body)
                .map(|b| b.error)
                .unwrap_or(body);
            return Err(EmbeddingError::Service { status, message });
        }
        let parsed: EmbedResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| EmbeddingError::Transport(format!("malformed response: {e}")))?;
        if parsed.embeddings.len() != items.len() {
            return Err(EmbeddingError::Transport(format!(
                "requested {} embeddings, received {}",
                items.len(),
                parsed.embeddings.len()
            )));
        }
        let expected = *self.dimension.get_or_init(|| parsed.dimension);
        if parsed.dimension != expected {
            return Err(EmbeddingError::DimensionMismatch {
                expected,
                found: parsed.dimension,
            });
        }
        parsed
            .embeddings
            .into_iter()
            .zip(labels)
            .map(|(values, label)| {
                if values.len() != expected {
                    return Err(EmbeddingError::DimensionMismatch {
                        expected,
                        found: values.len(),
                    });
                }
                Embedding::normalize(values, label)
            })
            .collect()
    }
}

impl EmbeddingBackend for HttpBackend {
    fn dimension(&self) -> Option<usize> {
        self.dimension.get().copied()
    }

    fn embed_text(&self, prompt: &str) -> Result<Embedding, EmbeddingError> {
        Ok(self.embed_texts(&[prompt])?.remove(0))
    }

    fn embed_image(&self, image: &ImageRef) -> Result<Embedding, EmbeddingError> {
        Ok(self.embed_images(&[image])?.remove(0))
    }

    fn embed_texts(&self, prompts: &[&str]) -> Result<Vec<Embedding>, EmbeddingError> {
        if prompts.iter().any(|p| p.is_empty()) {
            return Err(EmbeddingError::EmptyPrompt);
        }
        let labels: Vec<String> = prompts.iter().map(|p| p.to_string()).collect();
        self.request("text", prompts, &labels)
    }

    fn embed_images(&self, images: &[&ImageRef]) -> Result<Vec<Embedding>, EmbeddingError> {
        let sources: Vec<&str> = images.iter().map(|i| i.source.as_str()).collect();
        let labels: Vec<String> = images.iter().map(|i| i.key()).collect();
        self.request("image", &sources, &labels)
    }
}
