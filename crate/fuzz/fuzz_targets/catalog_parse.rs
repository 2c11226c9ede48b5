#![no_main]

use descry_core::catalog::{load_catalog, prompt_plan, PromptStyle};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(catalog) = load_catalog(text) else { return };
    // an accepted catalog must render in every style and survive a round trip
    for style in PromptStyle::ALL {
        let _ = prompt_plan(&catalog, style);
    }
    let document = catalog.to_document().expect("valid catalog serializes");
    assert_eq!(load_catalog(&document).expect("round trip parses"), catalog);
});
