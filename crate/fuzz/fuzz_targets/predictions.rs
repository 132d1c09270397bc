#![no_main]

use advqa_core::analysis::parse_predictions;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let _ = parse_predictions(data);
});
