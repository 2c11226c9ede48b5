//! Observation probabilities, pooling, view aggregation, and study diagnosis.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{prompt_plan, Catalog, PromptStyle};
use crate::embedding::{Embedding, EmbeddingBackend, EmbeddingError, ImageRef, ViewPosition};

/// Lower clamp applied to observation probabilities before taking logs.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("pathology {0:?} has no observation probabilities to pool")]
    NothingToPool(String),
    #[error("study has no images")]
    NoImages,
    #[error("views cover different descriptor sets")]
    DescriptorMismatch,
    #[error("study {0:?} has no frontal view")]
    NoFrontalView(String),
    #[error("no pathology probabilities to derive a rule-based score from")]
    NoPathologies,
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
}

/// Dot product of two unit vectors, clamped to [-1, 1].
pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64, InferenceError> {
    if a.dimension() != b.dimension() {
        return Err(InferenceError::DimensionMismatch(a.dimension(), b.dimension()));
    }
    let dot: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum();
    Ok(dot.clamp(-1.0, 1.0))
}

/// Two-way softmax of `sim_pos / temperature` against `sim_neg / temperature`.
///
/// The smaller class probability is computed directly and the larger one as
/// its complement, so swapping the arguments yields values summing to exactly 1.
pub fn contrastive_probability(sim_pos: f64, sim_neg: f64, temperature: f64) -> f64 {
    if sim_pos == sim_neg {
        return 0.5;
    }
    // exp(min - max) in (0, 1]
    let q = (-(sim_pos - sim_neg).abs() / temperature).exp();
    let minority = q / (1.0 + q);
    if sim_pos > sim_neg {
        1.0 - minority
    } else {
        minority
    }
}

/// Maps a cosine similarity to [0, 1] for styles without a negative prompt.
pub fn basic_probability(sim_pos: f64) -> f64 {
    ((sim_pos + 1.0) / 2.0).clamp(0.0, 1.0)
}

/// Mean log observation probability; its exponential is the geometric mean.
pub fn pool_pathology_score(probabilities: &[f64]) -> Result<f64, InferenceError> {
    if probabilities.is_empty() {
        return Err(InferenceError::NothingToPool(String::new()));
    }
    let sum: f64 = probabilities
        .iter()
        .map(|p| p.clamp(PROBABILITY_FLOOR, 1.0).ln())
        .sum();
    Ok(sum / probabilities.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationMode {
    SingleFrontal,
    #[default]
    Mean,
    Max,
}

impl AggregationMode {
    pub const ALL: [AggregationMode; 3] = [
        AggregationMode::SingleFrontal,
        AggregationMode::Mean,
        AggregationMode::Max,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AggregationMode::SingleFrontal => "single-frontal",
            AggregationMode::Mean => "mean",
            AggregationMode::Max => "max",
        }
    }
}

impl fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AggregationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AggregationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown aggregation mode {s:?} (expected single-frontal, mean or max)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoFindingRule {
    /// `1 - max_p P(p)`
    #[default]
    Max,
    /// `prod_p (1 - P(p))`
    Product,
}

impl NoFindingRule {
    pub fn as_str(self) -> &'static str {
        match self {
            NoFindingRule::Max => "max",
            NoFindingRule::Product => "product",
        }
    }

    pub fn score(self, pathology_probabilities: &[f64]) -> Result<f64, InferenceError> {
        match self {
            NoFindingRule::Max => no_finding_score(pathology_probabilities),
            NoFindingRule::Product => {
                if pathology_probabilities.is_empty() {
                    return Err(InferenceError::NoPathologies);
                }
                Ok(pathology_probabilities.iter().map(|p| 1.0 - p).product())
            }
        }
    }
}

impl FromStr for NoFindingRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "max" => Ok(NoFindingRule::Max),
            "product" => Ok(NoFindingRule::Product),
            _ => Err(format!("unknown no-finding rule {s:?} (expected max or product)")),
        }
    }
}

/// Probability that none of the given pathologies is present: `1 - max`.
pub fn no_finding_score(pathology_probabilities: &[f64]) -> Result<f64, InferenceError> {
    pathology_probabilities
        .iter()
        .copied()
        .reduce(f64::max)
        .map(|max| 1.0 - max)
        .ok_or(InferenceError::NoPathologies)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationProbability {
    #[serde(skip)]
    pub pathology: String,
    #[serde(rename = "text")]
    pub descriptor: String,
    pub probability: f64,
    pub sim_pos: f64,
    pub sim_neg: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewObservations {
    pub view: ViewPosition,
    pub observations: Vec<ObservationProbability>,
}

/// Combine per-view observation probabilities into one list.
///
/// Similarities follow the probabilities: averaged for `Mean`, taken from the
/// winning view for `Max`, and from the first frontal view for
/// `SingleFrontal`.
pub fn aggregate_views(
    views: &[ViewObservations],
    mode: AggregationMode,
) -> Result<Vec<ObservationProbability>, InferenceError> {
    let first = views.first().ok_or(InferenceError::NoImages)?;
    for v in &views[1..] {
        let same = v.observations.len() == first.observations.len()
            && v.observations.iter().zip(&first.observations).all(|(a, b)| {
                a.pathology == b.pathology
                    && a.descriptor == b.descriptor
                    && a.sim_neg.is_some() == b.sim_neg.is_some()
            });
        if !same {
            return Err(InferenceError::DescriptorMismatch);
        }
    }
    match mode {
        AggregationMode::SingleFrontal => views
            .iter()
            .find(|v| v.view == ViewPosition::Frontal)
            .map(|v| v.observations.clone())
            .ok_or_else(|| InferenceError::NoFrontalView(String::new())),
        AggregationMode::Max => Ok((0..first.observations.len())
            .map(|i| {
                let mut best = &first.observations[i];
                for v in &views[1..] {
                    if v.observations[i].probability > best.probability {
                        best = &v.observations[i];
                    }
                }
                best.clone()
            })
            .collect()),
        AggregationMode::Mean => Ok((0..first.observations.len())
            .map(|i| {
                let column: Vec<&ObservationProbability> =
                    views.iter().map(|v| &v.observations[i]).collect();
                let head = column[0];
                let sim_neg: Vec<f64> = column.iter().filter_map(|o| o.sim_neg).collect();
                ObservationProbability {
                    pathology: head.pathology.clone(),
                    descriptor: head.descriptor.clone(),
                    probability: mean(column.iter().map(|o| o.probability)).clamp(0.0, 1.0),
                    sim_pos: mean(column.iter().map(|o| o.sim_pos)),
                    sim_neg: head.sim_neg.map(|_| mean(sim_neg.into_iter())),
                }
            })
            .collect()),
    }
}

// offset by the first value so that equal inputs average to themselves exactly
fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len() as f64;
    let mut values = values.peekable();
    let origin = values.peek().copied().unwrap_or(0.0);
    origin + values.map(|v| v - origin).sum::<f64>() / n
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub style: PromptStyle,
    pub temperature: f64,
    pub mode: AggregationMode,
    pub no_finding: NoFindingRule,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            style: PromptStyle::ReportStyle,
            temperature: 1.0,
            mode: AggregationMode::Mean,
            no_finding: NoFindingRule::Max,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathologyPrediction {
    pub name: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub rule_based: bool,
    /// Mean log observation probability; for the rule-based label, the log of
    /// its probability floored at [`PROBABILITY_FLOOR`].
    pub score: f64,
    pub probability: f64,
    /// Sorted by probability, highest first.
    pub descriptors: Vec<ObservationProbability>,
}

/// Per-study explanation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyPrediction {
    pub study_id: String,
    pub style: PromptStyle,
    pub aggregation: AggregationMode,
    pub views: usize,
    pub pathologies: Vec<PathologyPrediction>,
}

impl StudyPrediction {
    pub fn pathology(&self, name: &str) -> Option<&PathologyPrediction> {
        self.pathologies.iter().find(|p| p.name == name)
    }

    pub fn probability(&self, name: &str) -> Option<f64> {
        self.pathology(name).map(|p| p.probability)
    }

    /// Probability of one descriptor of one pathology.
    pub fn descriptor_probability(&self, pathology: &str, descriptor: &str) -> Option<f64> {
        self.pathology(pathology)?
            .descriptors
            .iter()
            .find(|d| d.descriptor == descriptor)
            .map(|d| d.probability)
    }

    pub fn aggregation_label(&self) -> String {
        if self.views == 1 {
            "single view".to_string()
        } else {
            format!("{} over {} views", self.aggregation, self.views)
        }
    }
}

struct EmbeddedPrompt {
    pathology: usize,
    descriptor: String,
    positive: Embedding,
    negative: Option<Embedding>,
}

/// Diagnoses studies against one catalog and style. Prompt embeddings are
/// computed once at construction and shared across studies.
pub struct Diagnoser<'a> {
    catalog: &'a Catalog,
    config: InferenceConfig,
    backend: &'a dyn EmbeddingBackend,
    prompts: Vec<EmbeddedPrompt>,
}

impl<'a> Diagnoser<'a> {
    pub fn new(
        catalog: &'a Catalog,
        config: InferenceConfig,
        backend: &'a dyn EmbeddingBackend,
    ) -> Result<Self, InferenceError> {
        if !(config.temperature > 0.0 && config.temperature.is_finite()) {
            return Err(InferenceError::InvalidTemperature(config.temperature));
        }
        let plan = prompt_plan(catalog, config.style);
        let mut texts: Vec<&str> = Vec::with_capacity(plan.len() * 2);
        for pair in &plan {
            texts.push(&pair.positive);
            if let Some(neg) = &pair.negative {
                texts.push(neg);
            }
        }
        let mut embedded = backend.embed_texts(&texts)?.into_iter();
        let mut prompts = Vec::with_capacity(plan.len());
        for pair in &plan {
            let pathology = catalog
                .pathologies
                .iter()
                .position(|p| p.name == pair.pathology)
                .expect("plan pathology is in catalog");
            let positive = embedded.next().expect("one embedding per prompt");
            let negative = pair
                .negative
                .as_ref()
                .map(|_| embedded.next().expect("one embedding per prompt"));
            prompts.push(EmbeddedPrompt {
                pathology,
                descriptor: pair
                    .descriptor
                    .clone()
                    .unwrap_or_else(|| pair.pathology.clone()),
                positive,
                negative,
            });
        }
        Ok(Diagnoser {
            catalog,
            config,
            backend,
            prompts,
        })
    }

    pub fn config(&self) -> &InferenceConfig {
        &self.config
    }

    fn observe(&self, image: &Embedding) -> Result<Vec<ObservationProbability>, InferenceError> {
        self.prompts
            .iter()
            .map(|prompt| {
                let sim_pos = cosine_similarity(image, &prompt.positive)?;
                let sim_neg = prompt
                    .negative
                    .as_ref()
                    .map(|neg| cosine_similarity(image, neg))
                    .transpose()?;
                let probability = match sim_neg {
                    Some(sim_neg) => contrastive_probability(sim_pos, sim_neg, self.config.temperature),
                    None => basic_probability(sim_pos),
                };
                Ok(ObservationProbability {
                    pathology: self.catalog.pathologies[prompt.pathology].name.clone(),
                    descriptor: prompt.descriptor.clone(),
                    probability,
                    sim_pos,
                    sim_neg,
                })
            })
            .collect()
    }

    /// Score one study. Repeated image references are counted once.
    pub fn diagnose(&self, images: &[ImageRef]) -> Result<StudyPrediction, InferenceError> {
        let first = images.first().ok_or(InferenceError::NoImages)?;
        let mut seen = HashSet::new();
        let unique: Vec<&ImageRef> = images.iter().filter(|i| seen.insert(i.key())).collect();
        let embeddings = self.backend.embed_images(&unique)?;
        let views = unique
            .iter()
            .zip(&embeddings)
            .map(|(image, embedding)| {
                Ok(ViewObservations {
                    view: image.view,
                    observations: self.observe(embedding)?,
                })
            })
            .collect::<Result<Vec<_>, InferenceError>>()?;
        let observations = aggregate_views(&views, self.config.mode).map_err(|e| match e {
            InferenceError::NoFrontalView(_) => InferenceError::NoFrontalView(first.study_id.clone()),
            other => other,
        })?;

        let mut pathologies = Vec::with_capacity(self.catalog.pathologies.len());
        let mut scored = Vec::new();
        for (idx, pathology) in self.catalog.pathologies.iter().enumerate() {
            if pathology.rule_based {
                continue;
            }
            let mut descriptors: Vec<ObservationProbability> = observations
                .iter()
                .zip(&self.prompts)
                .filter(|(_, prompt)| prompt.pathology == idx)
                .map(|(o, _)| o.clone())
                .collect();
            let probs: Vec<f64> = descriptors.iter().map(|d| d.probability).collect();
            let score = pool_pathology_score(&probs)
                .map_err(|_| InferenceError::NothingToPool(pathology.name.clone()))?;
            let probability = score.exp();
            descriptors.sort_by(|a, b| b.probability.total_cmp(&a.probability));
            scored.push(probability);
            pathologies.push((
                idx,
                PathologyPrediction {
                    name: pathology.name.clone(),
                    rule_based: false,
                    score,
                    probability,
                    descriptors,
                },
            ));
        }
        if let Some(idx) = self.catalog.pathologies.iter().position(|p| p.rule_based) {
            let probability = self.config.no_finding.score(&scored)?;
            pathologies.push((
                idx,
                PathologyPrediction {
                    name: self.catalog.pathologies[idx].name.clone(),
                    rule_based: true,
                    score: probability.max(PROBABILITY_FLOOR).ln(),
                    probability,
                    descriptors: Vec::new(),
                },
            ));
        }
        pathologies.sort_by_key(|(idx, _)| *idx);

        Ok(StudyPrediction {
            study_id: first.study_id.clone(),
            style: self.config.style,
            aggregation: self.config.mode,
            views: unique.len(),
            pathologies: pathologies.into_iter().map(|(_, p)| p).collect(),
        })
    }
}

/// One-shot convenience over [`Diagnoser`].
pub fn diagnose_study(
    images: &[ImageRef],
    catalog: &Catalog,
    config: InferenceConfig,
    backend: &dyn EmbeddingBackend,
) -> Result<StudyPrediction, InferenceError> {
    if images.is_empty() {
        return Err(InferenceError::NoImages);
    }
    Diagnoser::new(catalog, config, backend)?.diagnose(images)
}
