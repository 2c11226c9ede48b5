//! Descriptor catalogs and prompt rendering.
//!
//! A catalog lists pathologies, each described by an ordered set of
//! radiological observations. Prompts are rendered from a catalog in one of
//! five styles, from a bare pathology name up to a full report-style sentence
//! with negation and pathology indication.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Refined CheXpert catalog, 14 labels including the rule-based "No Finding".
pub const CHEXPERT_REFINED: &str = include_str!("../catalogs/chexpert-refined.toml");
/// Slot for the unrefined descriptor lists. Same schema as the refined file.
pub const CHEXPERT_CHATGPT_RAW: &str = include_str!("../catalogs/chexpert-chatgpt-raw.toml");
/// Refined ChestX-ray14 catalog.
pub const CHESTXRAY14_REFINED: &str = include_str!("../catalogs/chestxray14-refined.toml");

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("catalog parse error: {0}")]
    Parse(String),
    #[error("catalog has no pathologies")]
    Empty,
    #[error("duplicate pathology {0:?}")]
    DuplicatePathology(String),
    #[error("duplicate descriptor {descriptor:?} in pathology {pathology:?}")]
    DuplicateDescriptor { pathology: String, descriptor: String },
    #[error("invalid descriptor {descriptor:?} in pathology {pathology:?}: {reason}")]
    InvalidDescriptor {
        pathology: String,
        descriptor: String,
        reason: &'static str,
    },
    #[error("invalid pathology name {0:?}")]
    InvalidPathologyName(String),
    #[error("pathology {0:?} has no descriptors")]
    NoDescriptors(String),
    #[error("more than one rule-based pathology: {0:?} and {1:?}")]
    MultipleRuleBased(String, String),
    #[error("catalog serialization failed: {0}")]
    Serialize(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("style {0} does not render descriptor prompts")]
    DescriptorlessStyle(PromptStyle),
    #[error("style {0} has no negative prompt")]
    NoNegative(PromptStyle),
    #[error("pathology {0:?} is rule-based and has no prompt")]
    RuleBased(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Descriptor {
    pub text: String,
    #[serde(default, skip_serializing_if = "is_false")]
    pub plural: bool,
}

impl Descriptor {
    pub fn new(text: impl Into<String>, plural: bool) -> Self {
        Descriptor {
            text: text.into(),
            plural,
        }
    }

    fn verb(&self) -> &'static str {
        if self.plural {
            "are"
        } else {
            "is"
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pathology {
    pub name: String,
    /// Alternative column names used by label tables (e.g. "Effusion").
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aliases: Vec<String>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub rule_based: bool,
    pub descriptors: Vec<Descriptor>,
}

impl Pathology {
    pub fn new(name: impl Into<String>, descriptors: Vec<Descriptor>) -> Self {
        Pathology {
            name: name.into(),
            aliases: Vec::new(),
            rule_based: false,
            descriptors,
        }
    }

    pub fn rule_based(name: impl Into<String>) -> Self {
        Pathology {
            name: name.into(),
            aliases: Vec::new(),
            rule_based: true,
            descriptors: Vec::new(),
        }
    }

    /// Whether `label` names this pathology, either canonically or by alias.
    pub fn answers_to(&self, label: &str) -> bool {
        self.name == label || self.aliases.iter().any(|a| a == label)
    }

    /// The name as it appears mid-sentence: lowercased, acronyms kept.
    pub fn sentence_name(&self) -> String {
        sentence_case(&self.name)
    }
}

fn sentence_case(name: &str) -> String {
    name.split(' ')
        .map(|word| {
            let letters = word.chars().filter(|c| c.is_alphabetic()).count();
            let is_acronym = letters >= 2
                && word
                    .chars()
                    .all(|c| !c.is_alphabetic() || c.is_uppercase());
            if is_acronym {
                word.to_string()
            } else {
                word.to_lowercase()
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Catalog {
    pub name: String,
    pub pathologies: Vec<Pathology>,
}

// Accepted document shape. Descriptor lists may be written as a
// comma-separated row or as a list whose items are plain strings or
// `{ text, plural }` tables.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CatalogDoc {
    name: String,
    pathologies: Vec<PathologyDoc>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PathologyDoc {
    name: String,
    #[serde(default)]
    aliases: Vec<String>,
    #[serde(default)]
    rule_based: bool,
    #[serde(default)]
    descriptors: DescriptorsDoc,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum DescriptorsDoc {
    Row(String),
    List(Vec<DescriptorDoc>),
}

impl Default for DescriptorsDoc {
    fn default() -> Self {
        DescriptorsDoc::List(Vec::new())
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum DescriptorDoc {
    Text(String),
    Full {
        text: String,
        #[serde(default)]
        plural: bool,
    },
}

impl DescriptorsDoc {
    fn into_descriptors(self) -> Vec<Descriptor> {
        match self {
            DescriptorsDoc::Row(row) => row
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| Descriptor::new(s, false))
                .collect(),
            DescriptorsDoc::List(items) => items
                .into_iter()
                .map(|item| match item {
                    DescriptorDoc::Text(text) => Descriptor::new(text, false),
                    DescriptorDoc::Full { text, plural } => Descriptor::new(text, plural),
                })
                .collect(),
        }
    }
}

/// Parse and validate a catalog document.
pub fn load_catalog(document: &str) -> Result<Catalog, CatalogError> {
    if document.trim().is_empty() {
        return Err(CatalogError::Parse("empty document".into()));
    }
    let doc: CatalogDoc =
        toml::from_str(document).map_err(|e| CatalogError::Parse(e.to_string()))?;
    let catalog = Catalog {
        name: doc.name,
        pathologies: doc
            .pathologies
            .into_iter()
            .map(|p| Pathology {
                name: p.name,
                aliases: p.aliases,
                rule_based: p.rule_based,
                descriptors: p.descriptors.into_descriptors(),
            })
            .collect(),
    };
    catalog.validate()?;
    Ok(catalog)
}

impl Catalog {
    pub fn new(name: impl Into<String>, pathologies: Vec<Pathology>) -> Result<Self, CatalogError> {
        let catalog = Catalog {
            name: name.into(),
            pathologies,
        };
        catalog.validate()?;
        Ok(catalog)
    }

    pub fn refined() -> Self {
        load_catalog(CHEXPERT_REFINED).expect("shipped catalog is valid")
    }

    pub fn chatgpt_raw() -> Self {
        load_catalog(CHEXPERT_CHATGPT_RAW).expect("shipped catalog is valid")
    }

    pub fn chestxray14_refined() -> Self {
        load_catalog(CHESTXRAY14_REFINED).expect("shipped catalog is valid")
    }

    pub fn validate(&self) -> Result<(), CatalogError> {
        if self.pathologies.is_empty() {
            return Err(CatalogError::Empty);
        }
        let mut names = HashSet::new();
        let mut rule_based: Option<&str> = None;
        for p in &self.pathologies {
            if p.name.trim().is_empty() || p.name.trim() != p.name || p.name.contains('\n') {
                return Err(CatalogError::InvalidPathologyName(p.name.clone()));
            }
            for label in std::iter::once(&p.name).chain(&p.aliases) {
                if !names.insert(label.as_str()) {
                    return Err(CatalogError::DuplicatePathology(label.clone()));
                }
            }
            if p.rule_based {
                if let Some(first) = rule_based {
                    return Err(CatalogError::MultipleRuleBased(first.into(), p.name.clone()));
                }
                rule_based = Some(&p.name);
            } else if p.descriptors.is_empty() {
                return Err(CatalogError::NoDescriptors(p.name.clone()));
            }
            let mut texts = HashSet::new();
            for d in &p.descriptors {
                let reason = if d.text.is_empty() {
                    Some("empty text")
                } else if d.text.trim() != d.text {
                    Some("leading or trailing whitespace")
                } else if d.text.contains(['\n', '\r']) {
                    Some("contains a newline")
                } else {
                    None
                };
                if let Some(reason) = reason {
                    return Err(CatalogError::InvalidDescriptor {
                        pathology: p.name.clone(),
                        descriptor: d.text.clone(),
                        reason,
                    });
                }
                if !texts.insert(d.text.as_str()) {
                    return Err(CatalogError::DuplicateDescriptor {
                        pathology: p.name.clone(),
                        descriptor: d.text.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Serialize to the canonical document form accepted by [`load_catalog`].
    pub fn to_document(&self) -> Result<String, CatalogError> {
        toml::to_string(self).map_err(|e| CatalogError::Serialize(e.to_string()))
    }

    pub fn pathology(&self, name: &str) -> Option<&Pathology> {
        self.pathologies.iter().find(|p| p.answers_to(name))
    }

    pub fn rule_based_pathology(&self) -> Option<&Pathology> {
        self.pathologies.iter().find(|p| p.rule_based)
    }

    /// Pathologies scored from their descriptors, in catalog order.
    pub fn scored_pathologies(&self) -> impl Iterator<Item = &Pathology> {
        self.pathologies.iter().filter(|p| !p.rule_based)
    }

    /// Keep only the named pathologies (plus the rule-based one, if any).
    pub fn subset(&self, names: &[&str]) -> Result<Catalog, CatalogError> {
        let pathologies = self
            .pathologies
            .iter()
            .filter(|p| p.rule_based || names.iter().any(|n| p.answers_to(n)))
            .cloned()
            .collect();
        Catalog::new(self.name.clone(), pathologies)
    }

    /// Hex SHA-256 over the ordered scored pathologies and their descriptor
    /// texts. Two catalogs with the same fingerprint produce identically
    /// ordered descriptor feature vectors.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for p in self.scored_pathologies() {
            hasher.update(p.name.as_bytes());
            hasher.update([0x1e]);
            for d in &p.descriptors {
                hasher.update(d.text.as_bytes());
                hasher.update([0x1f]);
            }
            hasher.update([0x1d]);
        }
        hex::encode(hasher.finalize())
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptStyle {
    /// `(No) <pathology>`
    PathologyBased,
    /// `<observation>`, positive only.
    Basic,
    /// `(No) <observation>`
    Contrastive,
    /// `(No) <observation> indicating <pathology>`
    PathologyIndication,
    /// `There is/are (no) <observation> indicating <pathology>.`
    ReportStyle,
}

impl PromptStyle {
    pub const ALL: [PromptStyle; 5] = [
        PromptStyle::PathologyBased,
        PromptStyle::Basic,
        PromptStyle::Contrastive,
        PromptStyle::PathologyIndication,
        PromptStyle::ReportStyle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptStyle::PathologyBased => "pathology-based",
            PromptStyle::Basic => "basic",
            PromptStyle::Contrastive => "contrastive",
            PromptStyle::PathologyIndication => "pathology-indication",
            PromptStyle::ReportStyle => "report-style",
        }
    }

    pub fn has_negative(self) -> bool {
        self != PromptStyle::Basic
    }

    pub fn uses_descriptors(self) -> bool {
        self != PromptStyle::PathologyBased
    }
}

impl fmt::Display for PromptStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PromptStyle::ALL
            .into_iter()
            .find(|style| style.as_str() == s)
            .ok_or_else(|| {
                format!(
                    "unknown prompt style {s:?} (expected one of {})",
                    PromptStyle::ALL.map(|s| s.as_str()).join(", ")
                )
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Polarity {
    Positive,
    Negative,
}

pub fn render_prompt(
    style: PromptStyle,
    descriptor: &Descriptor,
    pathology: &Pathology,
    polarity: Polarity,
) -> Result<String, PromptError> {
    let obs = &descriptor.text;
    let negative = polarity == Polarity::Negative;
    let prompt = match style {
        PromptStyle::PathologyBased => return Err(PromptError::DescriptorlessStyle(style)),
        PromptStyle::Basic if negative => return Err(PromptError::NoNegative(style)),
        PromptStyle::Basic => obs.clone(),
        PromptStyle::Contrastive if negative => format!("No {obs}"),
        PromptStyle::Contrastive => obs.clone(),
        PromptStyle::PathologyIndication => {
            let no = if negative { "No " } else { "" };
            format!("{no}{obs} indicating {}", pathology.sentence_name())
        }
        PromptStyle::ReportStyle => {
            let no = if negative { "no " } else { "" };
            format!(
                "There {} {no}{obs} indicating {}.",
                descriptor.verb(),
                pathology.sentence_name()
            )
        }
    };
    Ok(prompt)
}

pub fn render_pathology_prompt(
    pathology: &Pathology,
    polarity: Polarity,
) -> Result<String, PromptError> {
    if pathology.rule_based {
        return Err(PromptError::RuleBased(pathology.name.clone()));
    }
    Ok(match polarity {
        Polarity::Positive => pathology.name.clone(),
        Polarity::Negative => format!("No {}", pathology.name),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PromptPair {
    pub pathology: String,
    /// Absent for pathology-based prompts.
    pub descriptor: Option<String>,
    pub positive: String,
    /// Absent for the basic style.
    pub negative: Option<String>,
}

/// Every prompt needed to score `catalog` in `style`, in catalog order.
pub fn prompt_plan(catalog: &Catalog, style: PromptStyle) -> Vec<PromptPair> {
    let mut plan = Vec::new();
    for pathology in catalog.scored_pathologies() {
        if !style.uses_descriptors() {
            plan.push(PromptPair {
                pathology: pathology.name.clone(),
                descriptor: None,
                positive: render_pathology_prompt(pathology, Polarity::Positive)
                    .expect("scored pathology"),
                negative: Some(
                    render_pathology_prompt(pathology, Polarity::Negative)
                        .expect("scored pathology"),
                ),
            });
            continue;
        }
        for descriptor in &pathology.descriptors {
            let positive = render_prompt(style, descriptor, pathology, Polarity::Positive)
                .expect("descriptor style");
            let negative = style.has_negative().then(|| {
                render_prompt(style, descriptor, pathology, Polarity::Negative)
                    .expect("contrastive style")
            });
            plan.push(PromptPair {
                pathology: pathology.name.clone(),
                descriptor: Some(descriptor.text.clone()),
                positive,
                negative,
            });
        }
    }
    plan
}
