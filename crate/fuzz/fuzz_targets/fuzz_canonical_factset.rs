#![no_main]

use libfuzzer_sys::fuzz_target;
use xteval::kb::{parse_canonical, write_canonical};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    // Anything that parses must round-trip bit-for-bit.
    if let Ok(facts) = parse_canonical(text, "fuzz") {
        let mut buf = Vec::new();
        write_canonical(&facts, &mut buf).unwrap();
        let again = parse_canonical(std::str::from_utf8(&buf).unwrap(), "fuzz").unwrap();
        assert_eq!(facts.facts(), again.facts());
    }
});
