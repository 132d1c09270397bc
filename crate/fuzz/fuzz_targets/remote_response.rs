#![no_main]

use advqa_core::adversary::parse_remote_response;
use libfuzzer_sys::fuzz_target;

const PASSAGE: &str = "The big red barn stood near New York City while green fields surrounded the old mill in 1850.";

fuzz_target!(|data: &str| {
    if let Ok((_, start, end)) = parse_remote_response(data, PASSAGE) {
        assert!(start <= end && end <= PASSAGE.chars().count());
    }
});
