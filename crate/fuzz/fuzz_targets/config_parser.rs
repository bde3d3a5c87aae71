#![no_main]

use hylab_cli::config::parse_config;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(entries) = parse_config(text) {
            // Every accepted entry must point at a real line.
            let lines = text.lines().count();
            assert!(entries.iter().all(|e| e.line >= 1 && e.line <= lines));
        }
    }
});
