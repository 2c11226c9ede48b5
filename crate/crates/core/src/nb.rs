//! Gaussian Naive Bayes over descriptor probabilities.
//!
//! One binary model per pathology, trained on the descriptor probabilities the
//! zero-shot stage produces. This lets a labeled dataset reweight descriptors
//! instead of pooling them uniformly.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::Catalog;
use crate::eval::{evaluate_scores, EvalError, EvalReport, LabelTable, ReportMetadata};
use crate::inference::{contrastive_probability, StudyPrediction};

pub const VARIANCE_FLOOR: f64 = 1e-9;
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NbError {
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("no training samples")]
    NoSamples,
    #[error("{0} feature rows but {1} labels")]
    LengthMismatch(usize, usize),
    #[error("expected {expected} features, found {found}")]
    FeatureCount { expected: usize, found: usize },
    #[error("feature {index} of sample {sample} is {value}, outside [0, 1]")]
    FeatureOutOfRange { sample: usize, index: usize, value: f64 },
    #[error("non-finite feature at index {0}")]
    NonFiniteFeature(usize),
    #[error("catalog fingerprint mismatch: model {model}, catalog {catalog}")]
    FingerprintMismatch { model: String, catalog: String },
    #[error("model format error: {0}")]
    Format(String),
    #[error("study {study:?} has no probability for descriptor {descriptor:?} of {pathology:?}")]
    MissingFeature {
        study: String,
        pathology: String,
        descriptor: String,
    },
    #[error("model has no pathology {0:?}")]
    UnknownPathology(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureParams {
    pub mean0: f64,
    pub var0: f64,
    pub mean1: f64,
    pub var1: f64,
}

/// Binary Gaussian Naive Bayes. `priors[1]` is the positive class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianNb {
    pub priors: [f64; 2],
    pub features: Vec<FeatureParams>,
}

fn mean_and_variance(mut values: Vec<f64>) -> (f64, f64) {
    // sorted summation makes the fit independent of sample order
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    // offsetting by the first value keeps a constant column's mean exact
    let origin = values[0];
    let mean = origin + values.iter().map(|v| v - origin).sum::<f64>() / n;
    let mut sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    sq.sort_by(f64::total_cmp);
    let var = sq.iter().sum::<f64>() / n;
    (mean, var.max(VARIANCE_FLOOR))
}

fn log_density(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - (x - mean) * (x - mean) / (2.0 * var)
}

impl GaussianNb {
    /// Maximum-likelihood fit. Features must lie in [0, 1].
    pub fn fit(features: &[Vec<f64>], labels: &[bool]) -> Result<Self, NbError> {
        if features.len() != labels.len() {
            return Err(NbError::LengthMismatch(features.len(), labels.len()));
        }
        let width = features.first().ok_or(NbError::NoSamples)?.len();
        for (sample, row) in features.iter().enumerate() {
            if row.len() != width {
                return Err(NbError::FeatureCount {
                    expected: width,
                    found: row.len(),
                });
            }
            if let Some((index, &value)) = row
                .iter()
                .enumerate()
                .find(|(_, v)| !(0.0..=1.0).contains(*v))
            {
                return Err(NbError::FeatureOutOfRange { sample, index, value });
            }
        }
        let positives = labels.iter().filter(|&&l| l).count();
        if positives == 0 || positives == labels.len() {
            return Err(NbError::SingleClass);
        }
        let prior1 = positives as f64 / labels.len() as f64;
        let params = (0..width)
            .map(|j| {
                let column = |class: bool| -> Vec<f64> {
                    features
                        .iter()
                        .zip(labels)
                        .filter(|(_, &l)| l == class)
                        .map(|(row, _)| row[j])
                        .collect()
                };
                let (mean0, var0) = mean_and_variance(column(false));
                let (mean1, var1) = mean_and_variance(column(true));
                FeatureParams {
                    mean0,
                    var0,
                    mean1,
                    var1,
                }
            })
            .collect();
        Ok(GaussianNb {
            // 1 - prior1 makes the priors sum to exactly 1
            priors: [1.0 - prior1, prior1],
            features: params,
        })
    }

    fn log_likelihoods(&self, x: &[f64]) -> Result<(f64, f64), NbError> {
        if x.len() != self.features.len() {
            return Err(NbError::FeatureCount {
                expected: self.features.len(),
                found: x.len(),
            });
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(NbError::NonFiniteFeature(i));
        }
        let mut ll0 = 0.0;
        let mut ll1 = 0.0;
        for (&xj, f) in x.iter().zip(&self.features) {
            ll0 += log_density(xj, f.mean0, f.var0);
            ll1 += log_density(xj, f.mean1, f.var1);
        }
        Ok((ll0, ll1))
    }

    /// Posterior probability of the positive class.
    pub fn predict_proba(&self, x: &[f64]) -> Result<f64, NbError> {
        let (ll0, ll1) = self.log_likelihoods(x)?;
        let [p0, p1] = self.priors;
        Ok(p1 / (p1 + p0 * (ll0 - ll1).exp()))
    }

    /// Posteriors of both classes from the log-odds; they sum to exactly 1.
    pub fn class_posteriors(&self, x: &[f64]) -> Result<[f64; 2], NbError> {
        let (ll0, ll1) = self.log_likelihoods(x)?;
        let [p0, p1] = self.priors;
        let log_odds = (p1.ln() + ll1) - (p0.ln() + ll0);
        let positive = contrastive_probability(log_odds, 0.0, 1.0);
        let negative = contrastive_probability(0.0, log_odds, 1.0);
        Ok([negative, positive])
    }

    fn validate(&self) -> Result<(), NbError> {
        let [p0, p1] = self.priors;
        if !(p0 > 0.0 && p0 < 1.0 && p1 > 0.0 && p1 < 1.0) || (p0 + p1 - 1.0).abs() > 1e-12 {
            return Err(NbError::Format(format!("invalid priors [{p0}, {p1}]")));
        }
        for f in &self.features {
            // features live in [0, 1], so fitted means do too and variances stay below 1
            let means_ok = [f.mean0, f.mean1].iter().all(|m| (0.0..=1.0).contains(m));
            let vars_ok = [f.var0, f.var1].iter().all(|v| (VARIANCE_FLOOR..=1.0).contains(v));
            if !means_ok || !vars_ok {
                return Err(NbError::Format("invalid feature parameters".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSet {
    /// Only the target pathology's own descriptors.
    #[default]
    Own,
    /// Every scored descriptor of the catalog, concatenated in catalog order.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathologyModel {
    pub name: String,
    #[serde(flatten)]
    pub model: GaussianNb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NbModel {
    pub version: u32,
    pub catalog_fingerprint: String,
    #[serde(default)]
    pub feature_set: FeatureSet,
    pub pathologies: Vec<PathologyModel>,
    /// Free-form record of the run that produced the model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
}

/// Descriptor probabilities of `pathology` (or of the whole catalog) in
/// catalog order, read from a study's explanation.
pub fn descriptor_features(
    prediction: &StudyPrediction,
    catalog: &Catalog,
    pathology: &str,
    feature_set: FeatureSet,
) -> Result<Vec<f64>, NbError> {
    let sources: Vec<_> = match feature_set {
        FeatureSet::Own => catalog
            .scored_pathologies()
            .filter(|p| p.name == pathology)
            .collect(),
        FeatureSet::All => catalog.scored_pathologies().collect(),
    };
    if sources.is_empty() {
        return Err(NbError::UnknownPathology(pathology.to_string()));
    }
    let mut out = Vec::new();
    for p in sources {
        for d in &p.descriptors {
            let value = prediction
                .descriptor_probability(&p.name, &d.text)
                .ok_or_else(|| NbError::MissingFeature {
                    study: prediction.study_id.clone(),
                    pathology: p.name.clone(),
                    descriptor: d.text.clone(),
                })?;
            out.push(value);
        }
    }
    Ok(out)
}

impl NbModel {
    /// Fit one model per scored pathology that has both classes among the
    /// binary labels of `table`. Other pathologies are skipped with a warning.
    pub fn train(
        catalog: &Catalog,
        table: &LabelTable,
        predictions: &[StudyPrediction],
        feature_set: FeatureSet,
    ) -> Result<Self, NbError> {
        let by_study: HashMap<&str, &StudyPrediction> =
            predictions.iter().map(|p| (p.study_id.as_str(), p)).collect();
        let mut pathologies = Vec::new();
        for p in catalog.scored_pathologies() {
            if !table.pathologies.contains(&p.name) {
                continue;
            }
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for study in &table.studies {
                let Some(label) = study.labels.get(&p.name).and_then(|l| l.binary()) else {
                    continue;
                };
                let Some(prediction) = by_study.get(study.study_id.as_str()) else {
                    continue;
                };
                rows.push(descriptor_features(prediction, catalog, &p.name, feature_set)?);
                labels.push(label);
            }
            match GaussianNb::fit(&rows, &labels) {
                Ok(model) => pathologies.push(PathologyModel {
                    name: p.name.clone(),
                    model,
                }),
                Err(NbError::SingleClass | NbError::NoSamples) => {
                    log::warn!("skipping {}: training labels lack one class", p.name);
                }
                Err(e) => return Err(e),
            }
        }
        Ok(NbModel {
            version: MODEL_VERSION,
            catalog_fingerprint: catalog.fingerprint(),
            feature_set,
            pathologies,
            run_config: None,
        })
    }

    pub fn pathology(&self, name: &str) -> Option<&GaussianNb> {
        self.pathologies.iter().find(|p| p.name == name).map(|p| &p.model)
    }

    pub fn check_catalog(&self, catalog: &Catalog) -> Result<(), NbError> {
        let fingerprint = catalog.fingerprint();
        if fingerprint != self.catalog_fingerprint {
            return Err(NbError::FingerprintMismatch {
                model: self.catalog_fingerprint.clone(),
                catalog: fingerprint,
            });
        }
        Ok(())
    }

    /// Positive-class posterior for one pathology of one study.
    pub fn predict_study(
        &self,
        catalog: &Catalog,
        prediction: &StudyPrediction,
        pathology: &str,
    ) -> Result<f64, NbError> {
        self.check_catalog(catalog)?;
        let model = self
            .pathology(pathology)
            .ok_or_else(|| NbError::UnknownPathology(pathology.to_string()))?;
        let x = descriptor_features(prediction, catalog, pathology, self.feature_set)?;
        model.predict_proba(&x)
    }

    /// AUROC of the model's posteriors on every modeled, labeled pathology.
    pub fn evaluate(
        &self,
        catalog: &Catalog,
        table: &LabelTable,
        predictions: &[StudyPrediction],
    ) -> Result<EvalReport, NbEvalError> {
        self.check_catalog(catalog)?;
        let by_study: HashMap<&str, &StudyPrediction> =
            predictions.iter().map(|p| (p.study_id.as_str(), p)).collect();
        let mut scores: HashMap<(String, String), f64> = HashMap::new();
        let names: Vec<String> = table
            .pathologies
            .iter()
            .filter(|n| self.pathology(n).is_some())
            .cloned()
            .collect();
        for study in &table.studies {
            let Some(prediction) = by_study.get(study.study_id.as_str()) else {
                continue;
            };
            for name in &names {
                let p = self.predict_study(catalog, prediction, name)?;
                scores.insert((study.study_id.clone(), name.clone()), p);
            }
        }
        let metadata = ReportMetadata {
            scorer: "naive-bayes".into(),
            style: predictions.first().map(|p| p.style),
            mode: predictions.first().map(|p| p.aggregation),
            temperature: None,
            catalog: catalog.name.clone(),
        };
        Ok(evaluate_scores(table, metadata, &names, |s, p| {
            scores.get(&(s.to_string(), p.to_string())).copied()
        })?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, NbError> {
        let model: NbModel =
            serde_json::from_str(text).map_err(|e| NbError::Format(e.to_string()))?;
        if model.version != MODEL_VERSION {
            return Err(NbError::Format(format!("unsupported version {}", model.version)));
        }
        for p in &model.pathologies {
            p.model.validate()?;
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NbError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    /// Load a model and check it against `catalog`.
    pub fn load(path: impl AsRef<Path>, catalog: &Catalog) -> Result<Self, NbError> {
        let text = fs::read_to_string(path)?;
        let model = Self::from_json(&text)?;
        model.check_catalog(catalog)?;
        for p in &model.pathologies {
            let expected = match model.feature_set {
                FeatureSet::Own => catalog
                    .pathology(&p.name)
                    .map(|c| c.descriptors.len())
                    .ok_or_else(|| NbError::UnknownPathology(p.name.clone()))?,
                FeatureSet::All => catalog.scored_pathologies().map(|c| c.descriptors.len()).sum(),
            };
            if p.model.features.len() != expected {
                return Err(NbError::FeatureCount {
                    expected,
                    found: p.model.features.len(),
                });
            }
        }
        Ok(model)
    }
}

#[derive(Debug, Error)]
pub enum NbEvalError {
    #[error(transparent)]
    Model(#[from] NbError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uninformative_features_return_the_prior() {
        let x = vec![vec![0.4, 0.7]; 5];
        let labels = [true, false, false, true, false];
        let nb = GaussianNb::fit(&x, &labels).unwrap();
        assert_eq!(nb.features[0].mean0, nb.features[0].mean1);
        assert_eq!(nb.predict_proba(&[0.4, 0.7]).unwrap(), 0.4);
        assert_eq!(nb.predict_proba(&[0.9, 0.1]).unwrap(), 0.4);
    }

    #[test]
    fn separating_feature_reproduces_labels() {
        let x: Vec<Vec<f64>> = [0.1, 0.9, 0.1, 0.9, 0.9].iter().map(|&v| vec![v]).collect();
        let labels = [false, true, false, true, true];
        let nb = GaussianNb::fit(&x, &labels).unwrap();
        for (row, &label) in x.iter().zip(&labels) {
            let p = nb.predict_proba(row).unwrap();
            assert_eq!(p > 0.5, label);
            assert!(!(1e-6..=1.0 - 1e-6).contains(&p));
        }
    }

    #[test]
    fn two_samples_give_floored_variances() {
        let nb = GaussianNb::fit(&[vec![0.2, 0.3], vec![0.8, 0.6]], &[false, true]).unwrap();
        assert_eq!(nb.priors, [0.5, 0.5]);
        assert_eq!(nb.features[0].mean0, 0.2);
        assert_eq!(nb.features[0].mean1, 0.8);
        assert_eq!(nb.features[1].mean0, 0.3);
        assert_eq!(nb.features[1].mean1, 0.6);
        for f in &nb.features {
            assert_eq!(f.var0, VARIANCE_FLOOR);
            assert_eq!(f.var1, VARIANCE_FLOOR);
        }
    }

    #[test]
    fn fit_errors() {
        assert!(matches!(GaussianNb::fit(&[vec![0.1], vec![0.2]], &[true, true]), Err(NbError::SingleClass)));
        assert!(matches!(GaussianNb::fit(&[vec![0.1]], &[true, false]), Err(NbError::LengthMismatch(1, 2))));
        assert!(matches!(GaussianNb::fit(&[], &[]), Err(NbError::NoSamples)));
        assert!(matches!(
            GaussianNb::fit(&[vec![1.5], vec![0.2]], &[true, false]),
            Err(NbError::FeatureOutOfRange { .. })
        ));
    }

    #[test]
    fn symmetric_midpoint_is_even() {
        let nb = GaussianNb {
            priors: [0.5, 0.5],
            features: vec![FeatureParams { mean0: 0.2, var0: 0.01, mean1: 0.8, var1: 0.01 }],
        };
        assert!((nb.predict_proba(&[0.5]).unwrap() - 0.5).abs() < 1e-12);
        assert!(nb.predict_proba(&[0.8]).unwrap() > 0.99);
        assert!(matches!(nb.predict_proba(&[0.5, 0.5]), Err(NbError::FeatureCount { .. })));
    }

    #[test]
    fn class_posteriors_sum_to_one() {
        let nb = GaussianNb {
            priors: [0.7, 0.30000000000000004],
            features: vec![FeatureParams { mean0: 0.3, var0: 0.02, mean1: 0.6, var1: 0.05 }],
        };
        for x in [0.0, 0.13, 0.45, 0.77, 1.0] {
            let [n, p] = nb.class_posteriors(&[x]).unwrap();
            assert_eq!(n + p, 1.0);
            assert!((p - nb.predict_proba(&[x]).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn corrupted_json_is_a_format_error() {
        assert!(matches!(NbModel::from_json("{"), Err(NbError::Format(_))));
        let bad = r#"{"version":1,"catalog_fingerprint":"x","pathologies":[{"name":"A","priors":[0.5,0.5],"features":[{"mean0":0,"var0":0,"mean1":1,"var1":1}]}]}"#;
        assert!(matches!(NbModel::from_json(bad), Err(NbError::Format(_))));
        let version = r#"{"version":2,"catalog_fingerprint":"x","pathologies":[]}"#;
        assert!(matches!(NbModel::from_json(version), Err(NbError::Format(_))));
    }
}
