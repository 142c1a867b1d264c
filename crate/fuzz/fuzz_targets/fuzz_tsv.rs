#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(facts) = xteval::kb::parse_tsv(text, "fuzz") {
            if !facts.is_empty() {
                let _ = xteval::kb::build_entity_pools(&facts);
            }
        }
    }
});
