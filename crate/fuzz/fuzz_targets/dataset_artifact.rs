#![no_main]

use bikd::experiment::{DatasetManifest, RunManifest};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(m) = DatasetManifest::from_json(text) {
        assert_eq!(m.train_counts.len(), m.classes);
    }
    let _ = RunManifest::from_json(text);
});
