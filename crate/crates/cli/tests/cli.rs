//! End-to-end runs of the command-line front end.

use hylab_cli::{exit_code, run_with, CliError, EXIT_FALSIFIED, EXIT_INVALID, EXIT_OK};
use hylab_core::kernels::Kernel;
use std::fs;

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut argv = vec!["hylab"];
    argv.extend_from_slice(args);
    let code = run_with(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn header_field<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    line.split_whitespace().find_map(|tok| tok.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
}

#[test]
fn kernel_csv_has_run_header_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("k4.csv");
    let (code, out, _) = run(&["kernel", "--q", "4", "--d", "1", "--out", path.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("wrote"));
    let text = fs::read_to_string(&path).unwrap();
    let first = text.lines().next().unwrap();
    assert!(first.starts_with("# hylab v0.1.0 config_hash="));
    assert_eq!(header_field(first, "q"), Some("4"));
    assert_eq!(header_field(first, "d"), Some("1"));
    assert_eq!(header_field(first, "config_hash").unwrap().len(), 64);
    assert!(header_field(first, "tol").is_some());
    let k = Kernel::from_csv(&text).unwrap();
    assert!((k.value(0.0) - 3.0).abs() < 1e-6);
    assert!(dir.path().join("k4.report.txt").exists());
}

#[test]
fn norm_of_ball_prints_sixteen_thirds() {
    let (code, out, _) = run(&["norm", "--trial", "ball", "--q", "4", "--d", "1"]);
    assert_eq!(code, EXIT_OK);
    let line = out.lines().next().unwrap();
    assert!(line.starts_with("norm_q^q = 5.333333"), "{line}");
    assert!(line.contains("+-"));
    assert!(out.contains("convolution oracle 5.33333"));
}

#[test]
fn norm_of_interval_union_uses_support_key() {
    let (code, out, _) = run(&["norm", "--trial", "intervals", "--support", "-1:0,0.5:1.5", "--q", "4"]);
    assert_eq!(code, EXIT_OK, "{out}");
    let (code, _, err) = run(&["norm", "--trial", "intervals", "--q", "4"]);
    assert_eq!(code, EXIT_INVALID);
    assert!(err.contains("support"));
}

#[test]
fn phase_sweep_reports_quadratic_slope() {
    let (code, out, _) = run(&["sweep", "--family", "phase-t", "--q", "4"]);
    assert_eq!(code, EXIT_OK);
    let slope: f64 = out
        .lines()
        .find_map(|l| l.trim().strip_prefix("fitted slope"))
        .and_then(|rest| rest.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!((slope - 2.0).abs() < 0.05, "{slope}");
    assert!(out.contains("\nfamily,parameter,distance,deficit"));
}

#[test]
fn identical_configs_give_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for p in [&a, &b] {
        let (code, _, _) = run(&["stability", "--trials", "6", "--seed", "3", "--out", p.to_str().unwrap()]);
        assert_eq!(code, EXIT_OK);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let c = dir.path().join("c.csv");
    run(&["stability", "--trials", "6", "--seed", "4", "--out", c.to_str().unwrap()]);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn config_file_merges_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# sweep settings\nq = 4\nd = 2\nfamily = phase\n").unwrap();
    let out = dir.path().join("s.csv");
    let (code, _, err) = run(&["sweep", "--config", cfg.to_str().unwrap(), "--d", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK, "{err}");
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(header_field(text.lines().next().unwrap(), "d"), Some("1"));
}

#[test]
fn malformed_config_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "q = 4\n\nwhat is this\n").unwrap();
    let (code, _, err) = run(&["norm", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, EXIT_INVALID);
    assert!(err.contains("config line 3"), "{err}");
    fs::write(&cfg, "q = 4\nseed = 1\n").unwrap();
    let (code, _, err) = run(&["norm", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, EXIT_INVALID);
    assert!(err.contains("config line 2") && err.contains("unknown key 'seed'"), "{err}");
}

#[test]
fn validation_errors_exit_one() {
    for args in [
        vec!["norm", "--q", "-1"],
        vec!["norm", "--q", "4", "--d", "3"],
        vec!["norm"],
        vec!["sweep", "--family", "nonsense"],
        vec!["sweep", "--family", "phase", "--params", "0.1,0.2"],
        vec!["spectrum", "--n", "7"],
        vec!["frobnicate"],
        vec![],
    ] {
        let (code, _, err) = run(&args);
        assert_eq!(code, EXIT_INVALID, "{args:?}: {err}");
        assert!(!err.is_empty());
    }
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(run(&["--help"]).0, EXIT_OK);
    assert_eq!(run(&["--version"]).0, EXIT_OK);
    let (code, out, _) = run(&["sweep", "--help"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("--family"));
}

#[test]
fn falsification_maps_to_exit_two() {
    assert_eq!(exit_code(&Ok(None)), EXIT_OK);
    assert_eq!(exit_code(&Ok(Some("gap".into()))), EXIT_FALSIFIED);
    assert_eq!(exit_code(&Err(CliError::Io("x".into()))), EXIT_INVALID);
}

#[test]
fn spectrum_scan_and_taylor_run() {
    let (code, out, _) = run(&["spectrum", "--n", "64", "--k", "5"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("spectral gap q=4 d=1"));
    assert!(out.contains("index,eigenvalue,parity,h_overlap\n1,"));
    let (code, out, _) = run(&["scan-q", "--q-min", "3.8", "--q-max", "4.2", "--q-step", "0.2"]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(out.lines().filter(|l| l.starts_with(|c: char| c.is_ascii_digit())).count(), 3);
    let (code, out, _) = run(&["taylor", "--direction", "modulus"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("slope"), "{out}");
}
