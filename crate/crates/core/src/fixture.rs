//! Planted synthetic datasets with known ground truth.
//!
//! Each positive study has the positive prompts of its pathology's
//! descriptors, in every prompt style, planted into all of its images. A
//! working pipeline should therefore rank positive studies above negative ones
//! for every pathology.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{render_pathology_prompt, render_prompt, Catalog, CatalogError, Polarity, PromptStyle};
use crate::embedding::{ImageRef, PlantSet, SyntheticBackend, ViewPosition, DEFAULT_ALPHA};
use crate::eval::{Label, LabelTable, StudyLabels};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub seed: u64,
    pub studies: usize,
    pub dimension: usize,
    pub prevalence: f64,
    /// Fraction of studies that also get a lateral view.
    pub lateral_fraction: f64,
    pub alpha: f64,
    pub shared_text_weight: f64,
    pub affinity_spread: f64,
    /// Scored pathologies, by catalog name. The catalog's rule-based
    /// pathology is always included.
    pub pathologies: Vec<String>,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            seed: 7,
            studies: 50,
            dimension: 512,
            prevalence: 0.35,
            lateral_fraction: 0.3,
            alpha: DEFAULT_ALPHA,
            shared_text_weight: 0.2,
            affinity_spread: 1.5,
            pathologies: ["Cardiomegaly", "Edema", "Pneumonia", "Pleural Effusion"]
                .map(String::from)
                .to_vec(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Fixture {
    pub spec: FixtureSpec,
    pub catalog: Catalog,
    pub table: LabelTable,
    pub plants: PlantSet,
}

impl Fixture {
    pub fn backend(&self) -> SyntheticBackend {
        SyntheticBackend::new(self.spec.seed, self.spec.dimension).with_plants(self.plants.clone())
    }

    pub fn plants_json(&self) -> String {
        serde_json::to_string_pretty(&self.plants).expect("plant set serializes")
    }
}

/// Every positive prompt a style could render for `pathology`.
fn positive_prompts(catalog: &Catalog, pathology: &str) -> Vec<String> {
    let p = catalog.pathology(pathology).expect("fixture pathology in catalog");
    let mut out = Vec::new();
    for style in PromptStyle::ALL {
        if style.uses_descriptors() {
            for d in &p.descriptors {
                let prompt = render_prompt(style, d, p, Polarity::Positive).expect("style renders");
                out.push(prompt);
            }
        } else {
            out.push(render_pathology_prompt(p, Polarity::Positive).expect("style renders"));
        }
    }
    out.sort();
    out.dedup();
    out
}

pub fn generate_fixture(base: &Catalog, spec: FixtureSpec) -> Result<Fixture, CatalogError> {
    let mut names: Vec<&str> = spec.pathologies.iter().map(String::as_str).collect();
    if let Some(rule) = base.rule_based_pathology() {
        names.push(&rule.name);
    }
    let catalog = base.subset(&names)?;
    let scored: Vec<String> = catalog.scored_pathologies().map(|p| p.name.clone()).collect();
    let prompts: BTreeMap<&str, Vec<String>> = scored
        .iter()
        .map(|n| (n.as_str(), positive_prompts(&catalog, n)))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut positive: Vec<Vec<bool>> = (0..spec.studies)
        .map(|_| scored.iter().map(|_| rng.random_bool(spec.prevalence)).collect())
        .collect();
    // guarantee both classes for every pathology
    if spec.studies >= 2 {
        for j in 0..scored.len() {
            let column: Vec<bool> = positive.iter().map(|row| row[j]).collect();
            if !column.contains(&true) {
                positive[j % spec.studies][j] = true;
            }
            if !column.contains(&false) {
                positive[spec.studies - 1 - j % spec.studies][j] = false;
            }
        }
    }

    let mut plants = PlantSet {
        alpha: spec.alpha,
        shared_text_weight: spec.shared_text_weight,
        affinity_spread: spec.affinity_spread,
        plants: BTreeMap::new(),
    };
    let mut studies = Vec::with_capacity(spec.studies);
    for (i, row) in positive.iter().enumerate() {
        let study_id = format!("patient{:05}/study1", i + 1);
        let mut images = vec![ImageRef::from_path(&format!("{study_id}/view1_frontal.jpg"))];
        if rng.random_bool(spec.lateral_fraction) {
            images.push(ImageRef::from_path(&format!("{study_id}/view2_lateral.jpg")));
        }
        debug_assert_eq!(images[0].view, ViewPosition::Frontal);
        let mut labels = BTreeMap::new();
        for (name, &pos) in scored.iter().zip(row) {
            labels.insert(name.clone(), if pos { Label::Positive } else { Label::Negative });
            if pos {
                for image in &images {
                    plants
                        .plants
                        .entry(image.key())
                        .or_default()
                        .extend(prompts[name.as_str()].iter().cloned());
                }
            }
        }
        if let Some(rule) = catalog.rule_based_pathology() {
            let label = if row.contains(&true) { Label::Negative } else { Label::Positive };
            labels.insert(rule.name.clone(), label);
        }
        studies.push(StudyLabels {
            study_id,
            images,
            labels,
        });
    }

    let table = LabelTable {
        pathologies: catalog.pathologies.iter().map(|p| p.name.clone()).collect(),
        studies,
        ignored_columns: Vec::new(),
    };
    Ok(Fixture {
        spec,
        catalog,
        table,
        plants,
    })
}
