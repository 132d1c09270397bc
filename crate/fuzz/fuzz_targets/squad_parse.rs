#![no_main]

use advqa_core::store::{parse_squad, to_squad_json};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(d) = parse_squad(data) {
        let again = parse_squad(&to_squad_json(&d)).expect("written datasets parse");
        assert_eq!(again.canonical(), d.canonical());
    }
});
