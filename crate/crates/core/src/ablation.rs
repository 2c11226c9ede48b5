//! Batch prediction over label tables and style/aggregation ablations.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::catalog::{Catalog, PromptStyle};
use crate::embedding::{CachedBackend, EmbeddingBackend};
use crate::eval::{evaluate, EvalReport, LabelTable};
use crate::inference::{AggregationMode, Diagnoser, InferenceConfig, InferenceError, StudyPrediction};
use crate::Error;

/// Diagnose every study of `table`, in table order. Studies run in parallel on
/// the current rayon pool.
pub fn predict_studies(
    table: &LabelTable,
    catalog: &Catalog,
    config: InferenceConfig,
    backend: &dyn EmbeddingBackend,
) -> Result<Vec<StudyPrediction>, InferenceError> {
    let diagnoser = Diagnoser::new(catalog, config, backend)?;
    table
        .studies
        .par_iter()
        .map(|study| diagnoser.diagnose(&study.images))
        .collect()
}

pub fn evaluate_config(
    table: &LabelTable,
    catalog: &Catalog,
    config: InferenceConfig,
    backend: &dyn EmbeddingBackend,
) -> Result<EvalReport, Error> {
    let predictions = predict_studies(table, catalog, config, backend)?;
    Ok(evaluate(table, &predictions, &catalog.name, config.temperature)?)
}

/// Drop repeated entries, keeping first occurrences. Returns the duplicates.
pub fn dedup_in_order<T: PartialEq + Copy>(items: &mut Vec<T>) -> Vec<T> {
    let mut kept = Vec::with_capacity(items.len());
    let mut dropped = Vec::new();
    for &item in items.iter() {
        if kept.contains(&item) {
            dropped.push(item);
        } else {
            kept.push(item);
        }
    }
    *items = kept;
    dropped
}

/// One report per (style, mode) pair, styles outermost. Embeddings are cached
/// across all runs.
pub fn run_ablation(
    table: &LabelTable,
    catalog: &Catalog,
    backend: &dyn EmbeddingBackend,
    styles: &[PromptStyle],
    modes: &[AggregationMode],
    base: InferenceConfig,
) -> Result<Vec<EvalReport>, Error> {
    let mut styles = styles.to_vec();
    let mut modes = modes.to_vec();
    for dup in dedup_in_order(&mut styles) {
        log::warn!("style {dup} listed more than once; running it once");
    }
    for dup in dedup_in_order(&mut modes) {
        log::warn!("mode {dup} listed more than once; running it once");
    }
    let cached = CachedBackend::new(backend);
    let mut reports = Vec::with_capacity(styles.len() * modes.len());
    for &style in &styles {
        for &mode in &modes {
            let config = InferenceConfig { style, mode, ..base };
            reports.push(evaluate_config(table, catalog, config, &cached)?);
        }
    }
    Ok(reports)
}

#[derive(Debug, Serialize)]
pub struct ComparisonRow {
    pub style: Option<PromptStyle>,
    pub mode: Option<AggregationMode>,
    pub macro_auroc: Option<f64>,
    pub evaluated: usize,
}

pub fn comparison_rows(reports: &[EvalReport]) -> Vec<ComparisonRow> {
    reports
        .iter()
        .map(|r| ComparisonRow {
            style: r.metadata.style,
            mode: r.metadata.mode,
            macro_auroc: r.macro_auroc,
            evaluated: r.pathologies.iter().filter(|p| p.evaluated()).count(),
        })
        .collect()
}

/// Aligned plain-text comparison of macro AUROC across runs.
pub fn comparison_table(reports: &[EvalReport]) -> String {
    let rows = comparison_rows(reports);
    let name = |s: Option<PromptStyle>| s.map_or("-".to_string(), |s| s.to_string());
    let width = rows
        .iter()
        .map(|r| name(r.style).len())
        .chain(std::iter::once("style".len()))
        .max()
        .unwrap_or(5);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:<14}  {:>7}  {:>9}", "style", "mode", "macro", "evaluated");
    for r in &rows {
        let mode = r.mode.map_or("-".to_string(), |m| m.to_string());
        let auc = r.macro_auroc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
        let _ = writeln!(out, "{:<width$}  {:<14}  {:>7}  {:>9}", name(r.style), mode, auc, r.evaluated);
    }
    out
}
