#![no_main]

use descry_core::nb::NbModel;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(model) = NbModel::from_json(text) else { return };
    for p in &model.pathologies {
        let x = vec![0.5; p.model.features.len()];
        let posterior = p.model.predict_proba(&x).expect("matching feature count");
        assert!((0.0..=1.0).contains(&posterior));
    }
    assert_eq!(NbModel::from_json(&model.to_json()).expect("round trip parses"), model);
});
