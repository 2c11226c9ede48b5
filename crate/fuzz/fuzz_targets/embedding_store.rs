#![no_main]

use descry_core::embedding::{EmbeddingStore, StoreWriter};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(store) = EmbeddingStore::from_bytes(data) else { return };
    let mut writer = StoreWriter::new(store.dimension()).expect("opened store has a dimension");
    for (key, vector) in store.iter() {
        assert!(vector.iter().all(|v| v.is_finite()));
        writer.push(key, vector).expect("opened entries are valid");
    }
    let again = EmbeddingStore::from_bytes(&writer.to_bytes()).expect("rewritten store opens");
    assert_eq!(again.len(), store.len());
});
