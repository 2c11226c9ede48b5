//! Stores written by an independent writer must read back exactly and drive
//! a diagnosis through the file backend.

use std::path::PathBuf;

use descry_core::catalog::{Catalog, PromptStyle};
use descry_core::embedding::{open_store, write_store, EmbeddingBackend, FileBackend, ImageRef};
use descry_core::inference::{diagnose_study, AggregationMode, InferenceConfig};

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn expected(i: usize) -> Vec<f32> {
    (0..8).map(|j| ((i * 7 + j * 3) % 17) as f32 / 16.0 - 0.5).collect()
}

#[test]
fn reads_externally_written_stores() {
    let images = open_store(golden("edema-images.xple")).unwrap();
    assert_eq!(images.dimension(), 8);
    let keys: Vec<&str> = images.iter().map(|(k, _)| k).collect();
    assert_eq!(keys, ["p1/s1/view1_frontal", "p1/s1/view2_lateral"]);
    for (i, (_, v)) in images.iter().enumerate() {
        assert_eq!(v, expected(100 + i).as_slice());
    }

    let text = open_store(golden("edema-text.xple")).unwrap();
    assert_eq!(text.len(), 10);
    assert!(text.iter().all(|(k, _)| k.starts_with("There ") && k.ends_with("indicating edema.")));
    for (i, (_, v)) in text.iter().enumerate() {
        assert_eq!(v, expected(i).as_slice());
    }
}

#[test]
fn rewriting_reproduces_the_golden_bytes() {
    let original = std::fs::read(golden("edema-text.xple")).unwrap();
    let store = open_store(golden("edema-text.xple")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("copy.xple");
    write_store(&path, store.dimension(), store.iter().map(|(k, v)| (k.to_string(), v.to_vec()))).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), original);
}

#[test]
fn file_backend_diagnoses_from_golden_stores() {
    let backend = FileBackend::open_pair(golden("edema-text.xple"), golden("edema-images.xple")).unwrap();
    assert_eq!(backend.dimension(), Some(8));
    let catalog = Catalog::refined().subset(&["Edema"]).unwrap();
    let images = [
        ImageRef::from_path("p1/s1/view1_frontal.jpg"),
        ImageRef::from_path("p1/s1/view2_lateral.jpg"),
    ];
    for mode in [AggregationMode::Mean, AggregationMode::Max, AggregationMode::SingleFrontal] {
        let config = InferenceConfig {
            style: PromptStyle::ReportStyle,
            mode,
            ..InferenceConfig::default()
        };
        let prediction = diagnose_study(&images, &catalog, config, &backend).unwrap();
        let edema = prediction.pathology("Edema").unwrap();
        assert!(edema.probability > 0.0 && edema.probability < 1.0);
        assert!(prediction.probability("No Finding").is_some());
    }

    let basic = InferenceConfig {
        style: PromptStyle::Basic,
        ..InferenceConfig::default()
    };
    assert!(diagnose_study(&images, &catalog, basic, &backend).is_err());
}
