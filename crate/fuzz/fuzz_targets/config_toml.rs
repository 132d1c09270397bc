#![no_main]

use std::path::Path;

use advqa_gateway::config::PlatformConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(c) = PlatformConfig::from_toml(data, Path::new("fuzz.toml")) {
        if c.validate_offline().is_ok() {
            let _ = c.registry();
        }
    }
});
