#![no_main]

use advqa_core::adversary::AdversaryRegistry;
use advqa_core::eventlog::{parse_log, to_ndjson};
use advqa_core::{Engine, EngineConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(records) = parse_log(data) {
        assert_eq!(parse_log(&to_ndjson(&records)).expect("written logs parse").len(), records.len());
        // replay may reject the log but must not panic
        let _ = Engine::replay(EngineConfig::default(), AdversaryRegistry::new(), records);
    }
});
