//! Replays the checked-in fuzz corpus through both parser entry points.

use hylab_cli::config::parse_config;
use hylab_core::kernels::Kernel;
use std::path::PathBuf;

fn seeds(target: &str) -> Vec<(String, String)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<(String, String)> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|entry| {
            let path = entry.unwrap().path();
            let bytes = std::fs::read(&path).unwrap();
            (path.file_name().unwrap().to_string_lossy().into_owned(), String::from_utf8_lossy(&bytes).into_owned())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

#[test]
fn config_seeds_parse_or_fail_cleanly() {
    let results: Vec<(String, bool)> =
        seeds("config_parser").into_iter().map(|(name, text)| (name, parse_config(&text).is_ok())).collect();
    let ok = |n: &str| results.iter().find(|r| r.0 == n).unwrap().1;
    assert!(ok("norm.conf") && ok("sweep.conf"));
    assert!(!ok("duplicate.conf") && !ok("missing_equals.conf") && !ok("bad_key.conf") && !ok("empty_value.conf"));
}

#[test]
fn kernel_seeds_parse_or_fail_cleanly() {
    for (name, text) in seeds("kernel_csv") {
        match Kernel::from_csv(&text) {
            Ok(k) => {
                assert!(["k4_plain.csv", "l4_run_header.csv", "minimal.csv"].contains(&name.as_str()), "{name} parsed");
                for r in [0.0, 0.5, k.tail_radius, k.tail_radius + 1.0] {
                    assert!(k.value(r).is_finite(), "{name} at {r}");
                }
            }
            Err(e) => {
                assert!(!["k4_plain.csv", "l4_run_header.csv", "minimal.csv"].contains(&name.as_str()), "{name}: {e}")
            }
        }
    }
}
