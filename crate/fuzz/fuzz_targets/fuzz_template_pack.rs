#![no_main]

use libfuzzer_sys::fuzz_target;
use xteval::templates::TemplatePack;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(pack) = TemplatePack::parse(text) {
        // Every accepted template must render with each marker filled once.
        let relations: Vec<String> = pack.relations().cloned().collect();
        for relation in relations {
            for template in pack.templates(&relation) {
                let rendered = template.render("fuzz head", "fuzz relation", "fuzz tail");
                assert!(rendered.contains("fuzz head"));
                assert!(rendered.contains("fuzz tail"));
                let query = template.render_without_tail("fuzz head", "fuzz relation");
                assert!(!query.contains("fuzz tail"));
            }
        }
    }
});
