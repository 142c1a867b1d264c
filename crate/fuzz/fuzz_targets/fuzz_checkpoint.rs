#![no_main]

use libfuzzer_sys::fuzz_target;
use xteval::backend::ModelCheckpoint;
use xteval::eval::scorer_for_checkpoint;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(checkpoint) = serde_json::from_str::<ModelCheckpoint>(text) {
        // Scorer construction validates shapes; it must never panic.
        if let Ok(scorer) = scorer_for_checkpoint(&checkpoint) {
            let _ = scorer;
        }
    }
});
