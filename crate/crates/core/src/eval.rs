//! Label tables, AUROC, and per-pathology evaluation reports.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, PromptStyle};
use crate::embedding::{ImageRef, ViewPosition};
use crate::inference::{AggregationMode, StudyPrediction};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("label table: {0}")]
    Csv(String),
    #[error("label table row {row}: {message}")]
    Cell { row: usize, message: String },
    #[error("label table has neither a Study nor a Path column")]
    NoStudyColumn,
    #[error("score and label lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite score at index {0}")]
    NonFiniteScore(usize),
    #[error("missing predictions for studies: {}", .0.join(", "))]
    MissingPredictions(Vec<String>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
    Uncertain,
}

impl Label {
    fn parse(cell: &str) -> Option<Option<Label>> {
        let cell = cell.trim();
        if cell.is_empty() {
            return Some(None);
        }
        let normalized = cell.replace('\u{2212}', "-");
        let value: f64 = normalized.parse().ok()?;
        if value == 1.0 {
            Some(Some(Label::Positive))
        } else if value == 0.0 {
            Some(Some(Label::Negative))
        } else if value == -1.0 {
            Some(Some(Label::Uncertain))
        } else {
            None
        }
    }

    pub fn binary(self) -> Option<bool> {
        match self {
            Label::Positive => Some(true),
            Label::Negative => Some(false),
            Label::Uncertain => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyLabels {
    pub study_id: String,
    pub images: Vec<ImageRef>,
    /// Canonical pathology name to label; blank cells are absent.
    pub labels: BTreeMap<String, Label>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct LabelTable {
    /// Canonical names of the labeled pathology columns, in column order.
    pub pathologies: Vec<String>,
    pub studies: Vec<StudyLabels>,
    /// Header columns that matched no catalog pathology.
    pub ignored_columns: Vec<String>,
}

// CheXpert metadata columns, skipped without a warning.
const METADATA_COLUMNS: &[&str] = &["Sex", "Age", "Frontal/Lateral", "AP/PA", "View"];

/// Parse a CheXpert-style CSV label table.
///
/// Rows are grouped into studies by a `Study` column or, failing that, by the
/// directory of the `Path` column. View positions come from the path.
pub fn load_label_table(document: &str, catalog: &Catalog) -> Result<LabelTable, EvalError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(document.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| EvalError::Csv(e.to_string()))?
        .clone();
    let find = |names: &[&str]| {
        headers
            .iter()
            .position(|h| names.iter().any(|n| h.eq_ignore_ascii_case(n)))
    };
    let study_col = find(&["Study", "study_id"]);
    let path_col = find(&["Path"]);
    let view_col = find(&["Frontal/Lateral"]);
    if study_col.is_none() && path_col.is_none() {
        return Err(EvalError::NoStudyColumn);
    }

    let mut columns: Vec<(usize, String)> = Vec::new();
    let mut ignored = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        if Some(i) == study_col || Some(i) == path_col || METADATA_COLUMNS.contains(&h) {
            continue;
        }
        match catalog.pathology(h) {
            Some(p) => columns.push((i, p.name.clone())),
            None => {
                log::warn!("label column {h:?} matches no catalog pathology; ignored");
                ignored.push(h.to_string());
            }
        }
    }

    let mut table = LabelTable {
        pathologies: columns.iter().map(|(_, n)| n.clone()).collect(),
        studies: Vec::new(),
        ignored_columns: ignored,
    };
    let mut by_study: HashMap<String, usize> = HashMap::new();
    for (i, record) in reader.records().enumerate() {
        // header is line 1
        let row = i + 2;
        let record = record.map_err(|e| EvalError::Cell {
            row,
            message: e.to_string(),
        })?;
        let path = path_col.map(|c| record[c].to_string());
        let mut image = match &path {
            Some(p) if !p.is_empty() => ImageRef::from_path(p),
            _ => {
                let s = study_col.map(|c| record[c].to_string()).unwrap_or_default();
                ImageRef::new(s.clone(), format!("view{}", row - 1), s, ViewPosition::Frontal)
            }
        };
        if let Some(c) = study_col {
            let s = record[c].to_string();
            if s.is_empty() {
                return Err(EvalError::Cell {
                    row,
                    message: "empty study id".into(),
                });
            }
            image.study_id = s;
        }
        if let Some(c) = view_col {
            match record[c].to_ascii_lowercase().as_str() {
                "lateral" => image.view = ViewPosition::Lateral,
                "frontal" => image.view = ViewPosition::Frontal,
                _ => {}
            }
        }

        let mut labels = BTreeMap::new();
        for (c, name) in &columns {
            let cell = &record[*c];
            let label = Label::parse(cell).ok_or_else(|| EvalError::Cell {
                row,
                message: format!("malformed label {cell:?} in column {name:?}"),
            })?;
            if let Some(label) = label {
                labels.insert(name.clone(), label);
            }
        }

        let slot = *by_study.entry(image.study_id.clone()).or_insert_with(|| {
            table.studies.push(StudyLabels {
                study_id: image.study_id.clone(),
                images: Vec::new(),
                labels: BTreeMap::new(),
            });
            table.studies.len() - 1
        });
        let study = &mut table.studies[slot];
        for (name, label) in labels {
            match study.labels.get(&name) {
                Some(prev) if *prev != label => {
                    return Err(EvalError::Cell {
                        row,
                        message: format!(
                            "study {:?} has conflicting labels for {name:?}",
                            study.study_id
                        ),
                    })
                }
                _ => {
                    study.labels.insert(name, label);
                }
            }
        }
        if study.images.iter().any(|i| i.view_id == image.view_id) {
            return Err(EvalError::Cell {
                row,
                message: format!("duplicate view {:?} in study {:?}", image.view_id, study.study_id),
            });
        }
        study.images.push(image);
    }
    Ok(table)
}

impl LabelTable {
    pub fn study(&self, id: &str) -> Option<&StudyLabels> {
        self.studies.iter().find(|s| s.study_id == id)
    }

    /// Render back to CSV with `Study` and `Path` columns, one row per image.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["Study".to_string(), "Path".to_string()];
        header.extend(self.pathologies.iter().cloned());
        w.write_record(&header).expect("in-memory write");
        for s in &self.studies {
            for img in &s.images {
                let mut row = vec![s.study_id.clone(), img.source.clone()];
                for p in &self.pathologies {
                    row.push(
                        match s.labels.get(p) {
                            Some(Label::Positive) => "1.0",
                            Some(Label::Negative) => "0.0",
                            Some(Label::Uncertain) => "-1.0",
                            None => "",
                        }
                        .to_string(),
                    );
                }
                w.write_record(&row).expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

/// Mann-Whitney AUROC with half credit for ties. `None` when either class is
/// empty.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<Option<f64>, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore(i));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of positive ranks, with tied groups sharing their mean rank. Ranks
    // are doubled to stay integral.
    let mut doubled_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1, mean = (i + j + 2) / 2
        let doubled_mean = (i + j + 2) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        doubled_rank_sum += doubled_mean * pos_in_group;
        i = j + 1;
    }
    let p = positives as u128;
    // 2U = 2R - P(P+1), and U counts ties at half weight
    let doubled_u = doubled_rank_sum - p * (p + 1);
    Ok(Some(doubled_u as f64 / 2.0 / (positives as f64 * negatives as f64)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathologyAuroc {
    pub name: String,
    /// `None` when the pathology has no positives or no negatives.
    pub auroc: Option<f64>,
    pub positives: usize,
    pub negatives: usize,
}

impl PathologyAuroc {
    pub fn evaluated(&self) -> bool {
        self.auroc.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub scorer: String,
    pub style: Option<PromptStyle>,
    pub mode: Option<AggregationMode>,
    pub temperature: Option<f64>,
    pub catalog: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: ReportMetadata,
    pub pathologies: Vec<PathologyAuroc>,
    /// Unweighted mean over evaluated pathologies.
    pub macro_auroc: Option<f64>,
}

impl EvalReport {
    pub fn pathology(&self, name: &str) -> Option<&PathologyAuroc> {
        self.pathologies.iter().find(|p| p.name == name)
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let width = self
            .pathologies
            .iter()
            .map(|p| p.name.len())
            .chain(std::iter::once("macro".len()))
            .max()
            .unwrap_or(5);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>7}  {:>5}  {:>5}", "pathology", "AUROC", "pos", "neg");
        for p in &self.pathologies {
            let auc = p.auroc.map_or_else(|| "n/a".to_string(), |a| format!("{:.4}", a));
            let _ = writeln!(out, "{:<width$}  {:>7}  {:>5}  {:>5}", p.name, auc, p.positives, p.negatives);
        }
        let macro_auc = self.macro_auroc.map_or_else(|| "n/a".to_string(), |a| format!("{:.4}", a));
        let _ = writeln!(out, "{:<width$}  {:>7}", "macro", macro_auc);
        out
    }
}

/// Per-pathology AUROC of arbitrary study scores against `table`.
///
/// `score(study, pathology)` returns `None` when no prediction exists; that
/// is an error for any study with a binary label for that pathology.
pub fn evaluate_scores(
    table: &LabelTable,
    metadata: ReportMetadata,
    pathologies: &[String],
    score: impl Fn(&str, &str) -> Option<f64>,
) -> Result<EvalReport, EvalError> {
    let mut missing = Vec::new();
    let mut results = Vec::new();
    for name in pathologies {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for study in &table.studies {
            let Some(label) = study.labels.get(name).and_then(|l| l.binary()) else {
                continue;
            };
            match score(&study.study_id, name) {
                Some(s) => {
                    scores.push(s);
                    labels.push(label);
                }
                None => {
                    if !missing.contains(&study.study_id) {
                        missing.push(study.study_id.clone());
                    }
                }
            }
        }
        let positives = labels.iter().filter(|&&l| l).count();
        results.push(PathologyAuroc {
            name: name.clone(),
            auroc: auroc(&scores, &labels)?,
            positives,
            negatives: labels.len() - positives,
        });
    }
    if !missing.is_empty() {
        return Err(EvalError::MissingPredictions(missing));
    }
    let evaluated: Vec<f64> = results.iter().filter_map(|p| p.auroc).collect();
    let macro_auroc =
        (!evaluated.is_empty()).then(|| evaluated.iter().sum::<f64>() / evaluated.len() as f64);
    Ok(EvalReport {
        metadata,
        pathologies: results,
        macro_auroc,
    })
}

/// Evaluate study predictions on every labeled pathology they score.
pub fn evaluate(
    table: &LabelTable,
    predictions: &[StudyPrediction],
    catalog_name: &str,
    temperature: f64,
) -> Result<EvalReport, EvalError> {
    let by_study: HashMap<&str, &StudyPrediction> =
        predictions.iter().map(|p| (p.study_id.as_str(), p)).collect();
    let metadata = ReportMetadata {
        scorer: "pooled".into(),
        style: predictions.first().map(|p| p.style),
        mode: predictions.first().map(|p| p.aggregation),
        temperature: Some(temperature),
        catalog: catalog_name.to_string(),
    };
    let scored: Vec<String> = table
        .pathologies
        .iter()
        .filter(|name| {
            predictions.is_empty()
                || predictions.iter().any(|p| p.pathology(name).is_some())
        })
        .cloned()
        .collect();
    evaluate_scores(table, metadata, &scored, |study, pathology| {
        by_study.get(study).and_then(|p| p.probability(pathology))
    })
}
