#![no_main]

use descry_core::catalog::Catalog;
use descry_core::eval::load_label_table;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let catalog = Catalog::refined();
    let Ok(table) = load_label_table(text, &catalog) else { return };
    for study in &table.studies {
        assert!(!study.images.is_empty());
        assert!(study.labels.keys().all(|k| table.pathologies.contains(k)));
    }
});
