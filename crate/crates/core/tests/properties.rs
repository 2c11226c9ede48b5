use std::collections::BTreeMap;

use descry_core::catalog::{load_catalog, prompt_plan, Catalog, Descriptor, Pathology, PromptStyle};
use descry_core::embedding::{EmbeddingStore, ImageRef, StoreWriter, SyntheticBackend, ViewPosition};
use descry_core::eval::{auroc, evaluate, Label, LabelTable, StudyLabels};
use descry_core::inference::{
    aggregate_views, contrastive_probability, pool_pathology_score, AggregationMode,
    InferenceConfig, ObservationProbability, ViewObservations,
};
use descry_core::nb::{FeatureParams, GaussianNb};
use descry_core::{Diagnoser, EmbeddingBackend};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sim() -> impl Strategy<Value = f64> {
    -1.0f64..=1.0
}

fn probs() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..=1.0, 1..12)
}

proptest! {
    #[test]
    fn softmax_pairs_sum_to_one(a in sim(), b in sim(), t in 0.01f64..10.0) {
        let p = contrastive_probability(a, b, t);
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert_eq!(p + contrastive_probability(b, a, t), 1.0);
    }

    #[test]
    fn softmax_is_monotone(a in sim(), b in sim(), d in 1e-3f64..0.5) {
        let t = 1.0;
        prop_assert!(contrastive_probability(a + d, b, t) > contrastive_probability(a, b, t));
        prop_assert!(contrastive_probability(a, b + d, t) < contrastive_probability(a, b, t));
    }

    #[test]
    fn pooling_is_permutation_invariant(ps in probs(), seed in any::<u64>()) {
        let mut shuffled = ps.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        let a = pool_pathology_score(&ps).unwrap();
        let b = pool_pathology_score(&shuffled).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn pooling_is_monotone(ps in probs(), idx in any::<prop::sample::Index>(), bump in 0.0f64..1.0) {
        let i = idx.index(ps.len());
        let mut raised = ps.clone();
        raised[i] = (raised[i] + bump).min(1.0);
        prop_assert!(pool_pathology_score(&raised).unwrap() >= pool_pathology_score(&ps).unwrap() - 1e-15);
    }

    #[test]
    fn pooled_probability_is_clamped_geometric_mean(ps in probs()) {
        let score = pool_pathology_score(&ps).unwrap();
        let clamped: Vec<f64> = ps.iter().map(|p| p.max(1e-12)).collect();
        let log_mean = clamped.iter().map(|p| p.ln()).sum::<f64>() / clamped.len() as f64;
        prop_assert!((score - log_mean).abs() <= 1e-12);
        prop_assert!(score <= 0.0);
        let lo = clamped.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = clamped.iter().cloned().fold(0.0, f64::max);
        prop_assert!(score.exp() >= lo * (1.0 - 1e-12) && score.exp() <= hi * (1.0 + 1e-12));
    }

    #[test]
    fn auroc_of_score_and_probability_agree(ps in prop::collection::vec((1e-6f64..=1.0, any::<bool>()), 2..60)) {
        let scores: Vec<f64> = ps.iter().map(|(p, _)| p.ln()).collect();
        let probabilities: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        let labels: Vec<bool> = ps.iter().map(|(_, l)| *l).collect();
        prop_assert_eq!(auroc(&scores, &labels).unwrap(), auroc(&probabilities, &labels).unwrap());
    }

    #[test]
    fn negated_scores_complement_auroc(n in 2usize..80, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // distinct scores: a shuffled range
        let mut scores: Vec<f64> = (0..n).map(|i| i as f64).collect();
        for i in (1..n).rev() {
            scores.swap(i, rng.random_range(0..=i));
        }
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
        let a = auroc(&scores, &labels).unwrap().unwrap();
        let b = auroc(&negated, &labels).unwrap().unwrap();
        prop_assert!((a + b - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn auroc_ignores_sample_order(pairs in prop::collection::vec((0u8..6, any::<bool>()), 2..60)) {
        let scores: Vec<f64> = pairs.iter().map(|(s, _)| f64::from(*s)).collect();
        let labels: Vec<bool> = pairs.iter().map(|(_, l)| *l).collect();
        let rs: Vec<f64> = scores.iter().rev().cloned().collect();
        let rl: Vec<bool> = labels.iter().rev().cloned().collect();
        prop_assert_eq!(auroc(&scores, &labels).unwrap(), auroc(&rs, &rl).unwrap());
    }

    #[test]
    fn store_round_trips(dim in 1usize..48, rows in prop::collection::vec(prop::collection::vec(-1e3f32..1e3, 48), 0..20)) {
        let mut w = StoreWriter::new(dim).unwrap();
        for (i, row) in rows.iter().enumerate() {
            w.push(format!("k{i}"), &row[..dim]).unwrap();
        }
        let store = EmbeddingStore::from_bytes(&w.to_bytes()).unwrap();
        prop_assert_eq!(store.len(), rows.len());
        for (i, row) in rows.iter().enumerate() {
            let got = store.get(&format!("k{i}")).unwrap();
            prop_assert!(got.iter().zip(&row[..dim]).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn store_truncations_are_rejected(dim in 1usize..8, n in 1usize..5, cut in any::<prop::sample::Index>()) {
        let mut w = StoreWriter::new(dim).unwrap();
        for i in 0..n {
            w.push(format!("key{i}"), &vec![0.5; dim]).unwrap();
        }
        let bytes = w.to_bytes();
        let at = cut.index(bytes.len());
        prop_assert!(EmbeddingStore::from_bytes(&bytes[..at]).is_err());
    }

    #[test]
    fn catalog_document_round_trips(names in prop::collection::btree_set("[A-Z][a-z]{2,9}( [A-Z][a-z]{2,8})?", 1..6),
                                    texts in prop::collection::btree_set("[a-z]{3,8}( [a-z]{2,8}){0,3}", 1..6),
                                    plural in any::<bool>()) {
        let pathologies: Vec<Pathology> = names
            .iter()
            .map(|n| Pathology::new(n.clone(), texts.iter().map(|t| Descriptor::new(t.clone(), plural)).collect()))
            .collect();
        let catalog = Catalog::new("generated", pathologies).unwrap();
        let document = catalog.to_document().unwrap();
        prop_assert_eq!(load_catalog(&document).unwrap(), catalog);
    }

    #[test]
    fn negative_prompts_insert_no(style in prop::sample::select(PromptStyle::ALL.to_vec())) {
        for pair in prompt_plan(&Catalog::refined(), style) {
            match (style, &pair.negative) {
                (PromptStyle::Basic, None) => {}
                (PromptStyle::Basic, Some(_)) => prop_assert!(false, "basic has no negative"),
                (PromptStyle::ReportStyle, Some(neg)) => {
                    let at = pair.positive.find(" is ").or_else(|| pair.positive.find(" are ")).unwrap();
                    let verb_end = pair.positive[at + 1..].find(' ').unwrap() + at + 2;
                    let expected = format!("{}no {}", &pair.positive[..verb_end], &pair.positive[verb_end..]);
                    prop_assert_eq!(neg, &expected);
                }
                (_, Some(neg)) => prop_assert_eq!(neg, &format!("No {}", pair.positive)),
                (_, None) => prop_assert!(false, "missing negative"),
            }
        }
    }

    #[test]
    fn nb_posteriors_are_complementary(prior in 0.01f64..0.99, m0 in 0.0f64..1.0, m1 in 0.0f64..1.0,
                                       v0 in 1e-4f64..0.3, v1 in 1e-4f64..0.3, x in 0.0f64..=1.0) {
        let model = GaussianNb {
            priors: [1.0 - prior, prior],
            features: vec![FeatureParams { mean0: m0, var0: v0, mean1: m1, var1: v1 }],
        };
        let [neg, pos] = model.class_posteriors(&[x]).unwrap();
        prop_assert!((neg + pos - 1.0).abs() <= 1e-12);
        prop_assert!((pos - model.predict_proba(&[x]).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn nb_equal_class_parameters_give_the_prior(prior in 0.01f64..0.99, m in 0.0f64..1.0, v in 1e-4f64..0.3,
                                                 xs in prop::collection::vec(0.0f64..=1.0, 1..6)) {
        let f = FeatureParams { mean0: m, var0: v, mean1: m, var1: v };
        let model = GaussianNb { priors: [1.0 - prior, prior], features: vec![f; xs.len()] };
        prop_assert_eq!(model.predict_proba(&xs).unwrap(), prior);
    }

    #[test]
    fn nb_fit_ignores_sample_order(rows in prop::collection::vec((prop::collection::vec(0.0f64..=1.0, 3), any::<bool>()), 4..30)) {
        let mut rows = rows;
        rows[0].1 = true;
        rows[1].1 = false;
        let x: Vec<Vec<f64>> = rows.iter().map(|r| r.0.clone()).collect();
        let y: Vec<bool> = rows.iter().map(|r| r.1).collect();
        let rx: Vec<Vec<f64>> = x.iter().rev().cloned().collect();
        let ry: Vec<bool> = y.iter().rev().cloned().collect();
        let a = GaussianNb::fit(&x, &y).unwrap();
        let b = GaussianNb::fit(&rx, &ry).unwrap();
        prop_assert_eq!(&a, &b);
        for row in &x {
            prop_assert_eq!(a.predict_proba(row).unwrap().to_bits(), b.predict_proba(row).unwrap().to_bits());
        }
    }

    #[test]
    fn agreeing_views_aggregate_to_themselves(ps in prop::collection::vec(0.0f64..=1.0, 1..6), copies in 1usize..4) {
        let observations: Vec<ObservationProbability> = ps
            .iter()
            .enumerate()
            .map(|(i, &p)| ObservationProbability {
                pathology: "P".into(),
                descriptor: format!("d{i}"),
                probability: p,
                sim_pos: 0.0,
                sim_neg: Some(0.0),
            })
            .collect();
        let views = vec![ViewObservations { view: ViewPosition::Frontal, observations: observations.clone() }; copies];
        for mode in [AggregationMode::Mean, AggregationMode::Max, AggregationMode::SingleFrontal] {
            let merged = aggregate_views(&views, mode).unwrap();
            let got: Vec<f64> = merged.iter().map(|o| o.probability).collect();
            prop_assert_eq!(&got, &ps);
        }
    }
}

fn synthetic_table(seed: u64, studies: usize) -> (LabelTable, Catalog) {
    let catalog = Catalog::refined().subset(&["Edema", "Pneumonia"]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let studies = (0..studies)
        .map(|i| {
            let id = format!("p{i}/s1");
            let mut labels = BTreeMap::new();
            for p in ["Edema", "Pneumonia"] {
                let l = match rng.random_range(0..3) {
                    0 => Label::Negative,
                    1 => Label::Positive,
                    _ => Label::Uncertain,
                };
                labels.insert(p.to_string(), l);
            }
            StudyLabels {
                study_id: id.clone(),
                images: vec![ImageRef::new(id.clone(), "v1", format!("{id}/v1.jpg"), ViewPosition::Frontal)],
                labels,
            }
        })
        .collect();
    let table = LabelTable {
        pathologies: vec!["Edema".into(), "Pneumonia".into()],
        studies,
        ignored_columns: Vec::new(),
    };
    (table, catalog)
}

#[test]
fn evaluation_ignores_study_order_and_uncertain_only_studies() {
    let (table, catalog) = synthetic_table(5, 40);
    let backend = SyntheticBackend::new(5, 64);
    let diagnoser = Diagnoser::new(&catalog, InferenceConfig::default(), &backend).unwrap();
    let predictions: Vec<_> = table
        .studies
        .iter()
        .map(|s| diagnoser.diagnose(&s.images).unwrap())
        .collect();
    let base = evaluate(&table, &predictions, "refined", 1.0).unwrap();

    let mut reversed = table.clone();
    reversed.studies.reverse();
    let rev_predictions: Vec<_> = predictions.iter().rev().cloned().collect();
    let again = evaluate(&reversed, &rev_predictions, "refined", 1.0).unwrap();
    assert_eq!(base.pathologies, again.pathologies);

    let mut with_uncertain = table.clone();
    let id = "extra/s1".to_string();
    let image = ImageRef::new(id.clone(), "v1", "extra.jpg", ViewPosition::Frontal);
    with_uncertain.studies.push(StudyLabels {
        study_id: id,
        images: vec![image.clone()],
        labels: [("Edema", Label::Uncertain), ("Pneumonia", Label::Uncertain)]
            .map(|(k, v)| (k.to_string(), v))
            .into(),
    });
    let mut more = predictions.clone();
    more.push(diagnoser.diagnose(&[image]).unwrap());
    let with = evaluate(&with_uncertain, &more, "refined", 1.0).unwrap();
    assert_eq!(base.pathologies, with.pathologies);
}

#[test]
fn diagnosis_is_deterministic_and_unit_norm() {
    let catalog = Catalog::refined();
    let backend = SyntheticBackend::new(9, 96);
    let image = ImageRef::from_path("p1/s1/view1_frontal.jpg");
    let e = backend.embed_image(&image).unwrap();
    assert_eq!(e.dimension(), 96);
    assert!((e.norm() - 1.0).abs() < 1e-4);
    for style in PromptStyle::ALL {
        let config = InferenceConfig { style, ..InferenceConfig::default() };
        let a = Diagnoser::new(&catalog, config, &backend).unwrap().diagnose(std::slice::from_ref(&image)).unwrap();
        let b = Diagnoser::new(&catalog, config, &backend).unwrap().diagnose(std::slice::from_ref(&image)).unwrap();
        assert_eq!(a, b);
        for p in a.pathologies.iter().filter(|p| !p.rule_based) {
            assert!((p.probability - p.score.exp()).abs() <= 1e-12);
        }
    }
}

#[test]
fn prompt_plan_lengths() {
    let catalog = Catalog::refined();
    let descriptors: usize = catalog.scored_pathologies().map(|p| p.descriptors.len()).sum();
    let scored = catalog.scored_pathologies().count();
    for style in PromptStyle::ALL {
        let expected = if style.uses_descriptors() { descriptors } else { scored };
        assert_eq!(prompt_plan(&catalog, style).len(), expected, "{style}");
    }
}

/// Draws descriptor probabilities where only the first descriptor carries
/// signal, then compares the NB head to uniform pooling on held-out data.
#[test]
fn nb_beats_uniform_pooling_when_relevance_is_unequal() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut sample = |label: bool| -> Vec<f64> {
        let informative = if label { 0.75 } else { 0.45 };
        let mut row = vec![(informative + rng.random_range(-0.15..0.15f64)).clamp(0.0, 1.0)];
        for _ in 0..4 {
            row.push(rng.random_range(0.05..0.95));
        }
        row
    };
    let labels: Vec<bool> = (0..400).map(|i| i % 3 == 0).collect();
    let rows: Vec<Vec<f64>> = labels.iter().map(|&l| sample(l)).collect();
    let (train_x, test_x) = rows.split_at(200);
    let (train_y, test_y) = labels.split_at(200);

    let model = GaussianNb::fit(train_x, train_y).unwrap();
    let nb: Vec<f64> = test_x.iter().map(|r| model.predict_proba(r).unwrap()).collect();
    let pooled: Vec<f64> = test_x.iter().map(|r| pool_pathology_score(r).unwrap()).collect();
    let nb_auc = auroc(&nb, test_y).unwrap().unwrap();
    let pooled_auc = auroc(&pooled, test_y).unwrap().unwrap();
    assert!(nb_auc >= pooled_auc, "nb {nb_auc} < pooled {pooled_auc}");
    assert!(nb_auc > 0.9);
}
