#![no_main]

use libfuzzer_sys::fuzz_target;
use xteval::task::{parse_instances, write_instances};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(instances) = parse_instances(text) {
        let mut buf = Vec::new();
        write_instances(&instances, &mut buf).unwrap();
        let again = parse_instances(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(instances, again);
    }
});
