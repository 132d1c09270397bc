#![no_main]

use advqa_core::metrics::{f1, normalize};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: (&str, &str)| {
    let (a, b) = data;
    let score = f1(a, b);
    assert!((0.0..=1.0).contains(&score));
    assert_eq!(score, f1(b, a));
    assert_eq!(f1(a, a), 1.0);
    assert_eq!(normalize(a), normalize(&normalize(a).into_inner().join(" ")));
});
