#![no_main]

use libfuzzer_sys::fuzz_target;
use xteval::backend::BackendSpec;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(spec) = BackendSpec::parse(text) {
        // The canonical id must parse back to the same spec.
        let id = spec.canonical_id();
        let reparsed = BackendSpec::parse(&id).unwrap();
        assert_eq!(spec, reparsed);
    }
});
