//! Command-line front end for the laboratory.
//!
//! Every command reads an optional `--config FILE` (see [`config`]) merged with flags, runs
//! one experiment, prints a plain-text report and writes a CSV whose first line is a run
//! header `# hylab v<version> config_hash=<sha256> command=<name> q=.. d=.. tol=..`.
//!
//! Exit codes: 0 on success, 1 on a validation or computation error, 2 when a computed
//! result falsifies the property it checks (a negative certified deficit, a non-positive
//! spectral gap).

pub mod config;

use clap::{Arg, ArgMatches, Command};
use config::{parse_config, ConfigError, KeySpec, Settings};
use hylab_core::functional::{
    convolution_norm_oracle, default_tolerance, norm_q_with, q_scan, NormOptions, NormResult,
};
use hylab_core::kernels::{build_kernel, KernelKind, KernelOptions, RadialGrid};
use hylab_core::radial_fourier::{Point, SupportSet, TrialFunction};
use hylab_core::report::fmt12;
use hylab_core::spectral::{build_T_n, default_resolution, eigensystem, gap_estimate_with};
use hylab_core::stability::{
    default_parameters, family_member, optimality_sweep, sign_suite, stability_certificate, sweep_tolerance, Family,
};
use hylab_core::taylor::{remainder_scaling, Direction, TaylorTerms};
use hylab_core::LabError;
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_FALSIFIED: i32 = 2;

const fn key(name: &'static str, help: &'static str) -> KeySpec {
    KeySpec { name, help }
}

const OUT: KeySpec = key("out", "CSV output path (default: stdout after the report)");
const Q: KeySpec = key("q", "exponent q");
const D: KeySpec = key("d", "dimension, 1 or 2 (default 1)");

struct CommandSpec {
    name: &'static str,
    about: &'static str,
    keys: &'static [KeySpec],
}

const COMMANDS: &[CommandSpec] = &[
    CommandSpec {
        name: "kernel",
        about: "Sample K_q or L_q on a radial grid",
        keys: &[
            Q,
            D,
            key("kind", "K or L (default K)"),
            key("r-max", "last radius (default ceil(q+1))"),
            key("step", "radial spacing (default 1/128)"),
            OUT,
        ],
    },
    CommandSpec {
        name: "norm",
        about: "Evaluate ||(f e^{ig} 1_E)^||_q^q for a ball or interval-union indicator",
        keys: &[
            Q,
            D,
            key("trial", "ball or intervals (default ball)"),
            key("support", "intervals a:b,c:d for trial=intervals"),
            key("tol", "relative tolerance (default by dimension)"),
            OUT,
        ],
    },
    CommandSpec {
        name: "taylor",
        about: "Fit the order of the Taylor remainder along a perturbation direction",
        keys: &[
            key("q", "exponent q (default 4)"),
            D,
            key("direction", "modulus, phase or phase-quadratic (default phase)"),
            key("t-start", "first perturbation size (default 0.001)"),
            key("t-ratio", "geometric ratio (default sqrt 10)"),
            key("t-count", "number of sizes (default 5)"),
            OUT,
        ],
    },
    CommandSpec {
        name: "spectrum",
        about: "Spectrum of the second-variation operator and its spectral gap",
        keys: &[
            key("q", "exponent q (default 4)"),
            D,
            key("n", "grid resolution (default 512 in d=1, 24 radial nodes in d=2)"),
            key("k", "eigenpairs to list (default 60)"),
            OUT,
        ],
    },
    CommandSpec {
        name: "stability",
        about: "Stability certificate of a family member, or a randomized sign suite",
        keys: &[
            key("q", "exponent q (default 4)"),
            D,
            key("family", "modulus, phase, phase-affine or support; omit for the randomized suite"),
            key("s", "family parameter"),
            key("trials", "randomized trials (default 200)"),
            key("eps", "largest perturbation size (default 0.05)"),
            key("seed", "random seed (default 0)"),
            OUT,
        ],
    },
    CommandSpec {
        name: "scan-q",
        about: "Scan q -> ||1_B^||_q and report the largest adjacent jump",
        keys: &[
            D,
            key("q-min", "first exponent (default 3.6)"),
            key("q-max", "last exponent (default 4.4)"),
            key("q-step", "spacing (default 0.1)"),
            OUT,
        ],
    },
    CommandSpec {
        name: "sweep",
        about: "Exponent-optimality sweep of a perturbation family",
        keys: &[
            key("family", "modulus, phase, phase-affine, support or all"),
            key("q", "exponent q (default 4)"),
            D,
            key("params", "comma-separated geometric parameters (default per family)"),
            OUT,
        ],
    },
];

/// Clap command tree generated from the key tables.
pub fn command() -> Command {
    let mut cmd = Command::new("hylab")
        .version(VERSION)
        .about("Numerical laboratory for stability of the Hausdorff-Young functional")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for spec in COMMANDS {
        let mut sub = Command::new(spec.name)
            .about(spec.about)
            .arg(Arg::new("config").long("config").value_name("FILE").help("key = value configuration file"));
        for k in spec.keys {
            sub = sub.arg(Arg::new(k.name).long(k.name).value_name("VALUE").allow_hyphen_values(true).help(k.help));
        }
        cmd = cmd.subcommand(sub);
    }
    cmd
}

/// Failure modes of a command.
#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Lab(LabError),
    Io(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "{e}"),
            CliError::Lab(e) => write!(f, "{e}"),
            CliError::Io(e) => f.write_str(e),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<LabError> for CliError {
    fn from(e: LabError) -> Self {
        CliError::Lab(e)
    }
}

/// Result of one command before it is written out.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub q: Option<f64>,
    pub d: usize,
    pub tol: f64,
    pub csv: String,
    pub report: String,
    /// Description of a falsified check, if any.
    pub falsified: Option<String>,
}

/// SHA-256 of the command name and the canonical settings (output path excluded).
pub fn config_hash(command: &str, settings: &Settings) -> String {
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    h.update(b"\n");
    h.update(settings.canonical(&["out"]).as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Run header: the first line of every CSV.
pub fn header_line(command: &str, hash: &str, o: &Outcome) -> String {
    let q = o.q.map_or("-".to_string(), fmt12);
    format!("# hylab v{VERSION} config_hash={hash} command={command} q={q} d={} tol={}", o.d, fmt12(o.tol))
}

fn dimension(s: &Settings) -> Result<usize, CliError> {
    let d = s.usize_or("d", 1)?;
    s.ensure("d", d == 1 || d == 2, "dimension must be 1 or 2")?;
    Ok(d)
}

fn exponent(s: &Settings, default: Option<f64>) -> Result<f64, CliError> {
    let q = match default {
        Some(q) => s.f64_or("q", q)?,
        None => s.f64_required("q")?,
    };
    s.ensure("q", q > 2.0, "q must exceed 2")?;
    Ok(q)
}

fn family(s: &Settings, key: &str) -> Result<Option<Family>, CliError> {
    match s.raw(key) {
        None => Ok(None),
        Some(v) => Family::parse(v)
            .map(Some)
            .ok_or_else(|| ConfigError::new(None, format!("'{key}': unknown family '{v}'")).into()),
    }
}

fn run_kernel(s: &Settings) -> Result<Outcome, CliError> {
    let q = exponent(s, None)?;
    let d = dimension(s)?;
    let kind = match s.choice_or("kind", &["K", "L"], "K")? {
        "L" => KernelKind::L,
        _ => KernelKind::K,
    };
    let default = RadialGrid::default_for(q);
    let grid = RadialGrid { r_max: s.f64_or("r-max", default.r_max)?, step: s.f64_or("step", default.step)? };
    s.ensure("step", grid.step > 0.0 && grid.step <= 0.5, "step must lie in (0, 0.5]")?;
    s.ensure("r-max", grid.r_max / grid.step <= 1e6, "r-max / step must not exceed 1e6 nodes")?;
    let k = build_kernel(kind, q, d, grid, KernelOptions::default())?;
    let report = format!(
        "kernel {kind} q={} d={d}\n  value at 0       {}\n  nodes            {}\n  tail radius      {}\n  error bound      {}\n",
        fmt12(q),
        fmt12(k.values[0]),
        k.r.len(),
        fmt12(k.tail_radius),
        fmt12(k.error_bound())
    );
    Ok(Outcome { q: Some(q), d, tol: k.tolerance, csv: k.to_csv(), report, falsified: None })
}

fn run_norm(s: &Settings) -> Result<Outcome, CliError> {
    let q = exponent(s, None)?;
    let d = dimension(s)?;
    let tol = s.f64_or("tol", default_tolerance(d))?;
    s.ensure("tol", tol > 0.0 && tol < 1.0, "tol must lie in (0, 1)")?;
    let support = match s.choice_or("trial", &["ball", "intervals"], "ball")? {
        "intervals" => {
            s.ensure("trial", d == 1, "interval supports need d=1")?;
            let list =
                s.intervals("support")?.ok_or_else(|| ConfigError::new(None, "trial=intervals needs 'support'"))?;
            SupportSet::intervals(list)?
        }
        _ => {
            s.ensure("support", s.raw("support").is_none(), "only used with trial=intervals")?;
            SupportSet::unit_ball(d)
        }
    };
    let t = TrialFunction::indicator(support.clone())?;
    let r = norm_q_with(&t, q, NormOptions { tol: Some(tol), ..NormOptions::default() })?;
    let mut report = format!("norm_q^q = {} +- {}\n{}", fmt12(r.value), fmt12(r.budget()), r.report());
    if d == 1 && q.fract() == 0.0 && (q as usize).is_multiple_of(2) {
        let oracle = convolution_norm_oracle(&support, q as usize / 2)?;
        report.push_str(&format!("  convolution oracle {} (difference {})\n", fmt12(oracle), fmt12(r.value - oracle)));
    }
    let csv = format!("{}\n{}\n", NormResult::csv_header(), r.csv_row());
    Ok(Outcome { q: Some(q), d, tol, csv, report, falsified: None })
}

fn run_taylor(s: &Settings) -> Result<Outcome, CliError> {
    let q = exponent(s, Some(4.0))?;
    let d = dimension(s)?;
    let direction = match s.choice_or("direction", &["modulus", "phase", "phase-quadratic"], "phase")? {
        "modulus" => Direction::uniform_modulus(),
        "phase-quadratic" => Direction::Phase(Arc::new(|x: &Point| x[0] * x[0] + x[1] * x[1])),
        _ => Direction::linear_phase(),
    };
    let start = s.f64_or("t-start", 1e-3)?;
    let ratio = s.f64_or("t-ratio", 10f64.sqrt())?;
    let count = s.usize_or("t-count", 5)?;
    s.ensure("t-count", count <= 64, "at most 64 sizes")?;
    let t_list: Vec<f64> = (0..count).map(|k| start * ratio.powi(k as i32)).collect();
    let scaling = remainder_scaling(&direction, q, d, &t_list)?;
    let tol = default_tolerance(d);
    let mut csv = format!("t,{}\n", TaylorTerms::csv_header());
    for (t, row) in scaling.t.iter().zip(&scaling.rows) {
        csv.push_str(&format!("{},{}\n", fmt12(*t), row.csv_row()));
    }
    Ok(Outcome { q: Some(q), d, tol, csv, report: scaling.report(), falsified: None })
}

fn run_spectrum(s: &Settings) -> Result<Outcome, CliError> {
    let q = exponent(s, Some(4.0))?;
    let d = dimension(s)?;
    let n = s.usize_or("n", default_resolution(d))?;
    s.ensure("n", (4..=4096).contains(&n), "n must lie in [4, 4096]")?;
    let k = s.usize_or("k", 60)?;
    s.ensure("k", k >= 1, "k must be positive")?;
    let t = build_T_n(q, d, n)?;
    let es = eigensystem(&t, k)?;
    let gap = gap_estimate_with(q, d, n)?;
    let mut report = format!(
        "operator q={} d={d} n={n}\n  nodes                 {}\n  relative asymmetry    {}\n  reflection commutator {}\n  norm bound            {}\n  truncation index      {}\n  degenerate parities   {}\n",
        fmt12(q),
        t.grid.len(),
        fmt12(t.asymmetry()),
        fmt12(t.reflection_commutator()),
        fmt12(t.norm_bound),
        es.truncation_index(),
        es.degenerate
    );
    for p in es.pairs.iter().take(6) {
        report.push_str(&format!(
            "  eigenvalue {} ({}, null overlap {})\n",
            fmt12(p.value),
            p.parity.name(),
            fmt12(p.h_overlap)
        ));
    }
    report.push_str(&gap.report());
    report.push('\n');
    let falsified = gap.falsified.then(|| format!("spectral gap is not positive: {}", gap.report()));
    Ok(Outcome { q: Some(q), d, tol: 0.0, csv: es.csv(), report, falsified })
}

fn run_stability(s: &Settings) -> Result<Outcome, CliError> {
    let q = exponent(s, Some(4.0))?;
    let d = dimension(s)?;
    let tol = default_tolerance(d);
    if let Some(f) = family(s, "family")? {
        let p = s.f64_required("s")?;
        let t = family_member(f, d, p)?;
        let r = stability_certificate(&t, q)?;
        let csv = format!("{}\n{}\n", hylab_core::functional::DeficitReport::csv_header(), r.csv_row());
        let falsified = (r.certified_sign() == Some(-1.0)).then(|| "certified negative deficit".to_string());
        return Ok(Outcome { q: Some(q), d, tol, csv, report: r.report(), falsified });
    }
    s.ensure("s", s.raw("s").is_none(), "only used together with 'family'")?;
    let trials = s.usize_or("trials", 200)?;
    s.ensure("trials", (1..=100_000).contains(&trials), "trials must lie in [1, 100000]")?;
    let eps = s.f64_or("eps", 0.05)?;
    let seed = s.u64_or("seed", 0)?;
    let suite = sign_suite(q, d, trials, eps, seed)?;
    let falsified = (suite.violations() > 0 || suite.nonpositive_constants() > 0).then(|| {
        format!(
            "{} deficits below -budget, {} non-positive constants",
            suite.violations(),
            suite.nonpositive_constants()
        )
    });
    Ok(Outcome { q: Some(q), d, tol, csv: suite.csv(), report: suite.report(), falsified })
}

fn run_scan_q(s: &Settings) -> Result<Outcome, CliError> {
    let d = dimension(s)?;
    let lo = s.f64_or("q-min", 3.6)?;
    let hi = s.f64_or("q-max", 4.4)?;
    let step = s.f64_or("q-step", 0.1)?;
    s.ensure("q-min", lo > 2.0, "q-min must exceed 2")?;
    s.ensure("q-max", hi >= lo, "q-max must not be below q-min")?;
    s.ensure("q-step", step > 0.0 && (hi - lo) / step <= 1000.0, "q-step must be positive with at most 1000 steps")?;
    let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    let q_list: Vec<f64> = (0..count).map(|k| lo + k as f64 * step).collect();
    let scan = q_scan(&TrialFunction::ball(d)?, &q_list)?;
    let report = format!(
        "q scan of the ball d={d}\n  exponents        {}\n  largest jump     {}\n",
        q_list.len(),
        fmt12(scan.max_jump)
    );
    Ok(Outcome { q: None, d, tol: default_tolerance(d), csv: scan.csv(), report, falsified: None })
}

fn run_sweep(s: &Settings) -> Result<Outcome, CliError> {
    let q = exponent(s, Some(4.0))?;
    let d = dimension(s)?;
    let families = match s.raw("family") {
        Some("all") => {
            s.ensure("params", s.raw("params").is_none(), "not allowed with family=all")?;
            vec![Family::Modulus, Family::Phase, Family::Support]
        }
        _ => vec![family(s, "family")?.ok_or_else(|| ConfigError::new(None, "missing required key 'family'"))?],
    };
    let mut csv = String::new();
    let mut report = String::new();
    let mut negative = 0;
    for f in families {
        let params = s.f64_list("params")?.unwrap_or_else(|| default_parameters(f, d));
        let r = optimality_sweep(f, q, d, &params)?;
        negative += r.rows.iter().filter(|row| row.report.deficit < -row.report.budget).count();
        let mut lines = r.csv().lines().map(str::to_string).collect::<Vec<_>>().into_iter();
        let head = lines.next().unwrap_or_default();
        if csv.is_empty() {
            csv.push_str(&format!("family,{head}\n"));
        }
        for l in lines {
            csv.push_str(&format!("{},{l}\n", f.name()));
        }
        report.push_str(&r.report());
    }
    let falsified = (negative > 0).then(|| format!("{negative} deficits below -budget"));
    Ok(Outcome { q: Some(q), d, tol: sweep_tolerance(d), csv, report, falsified })
}

fn dispatch(name: &str, s: &Settings) -> Result<Outcome, CliError> {
    match name {
        "kernel" => run_kernel(s),
        "norm" => run_norm(s),
        "taylor" => run_taylor(s),
        "spectrum" => run_spectrum(s),
        "stability" => run_stability(s),
        "scan-q" => run_scan_q(s),
        "sweep" => run_sweep(s),
        other => Err(CliError::Io(format!("unknown command '{other}'"))),
    }
}

/// Resolve settings for a parsed subcommand.
pub fn settings_for(name: &str, m: &ArgMatches) -> Result<Settings, CliError> {
    let spec =
        COMMANDS.iter().find(|c| c.name == name).ok_or_else(|| CliError::Io(format!("unknown command '{name}'")))?;
    let file = match m.get_one::<String>("config") {
        Some(path) => {
            let text =
                std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("cannot read config '{path}': {e}")))?;
            parse_config(&text)?
        }
        None => Vec::new(),
    };
    let flags: Vec<(String, String)> =
        spec.keys.iter().filter_map(|k| m.get_one::<String>(k.name).map(|v| (k.name.to_string(), v.clone()))).collect();
    Ok(Settings::merge(name, spec.keys, &file, &flags)?)
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("cannot write '{}': {e}", path.display())))
}

fn execute(name: &str, m: &ArgMatches, out: &mut dyn Write) -> Result<Option<String>, CliError> {
    let settings = settings_for(name, m)?;
    let outcome = dispatch(name, &settings)?;
    let hash = config_hash(name, &settings);
    let csv = format!("{}\n{}", header_line(name, &hash, &outcome), outcome.csv);
    let io = |e: std::io::Error| CliError::Io(format!("cannot write output: {e}"));
    out.write_all(outcome.report.as_bytes()).map_err(io)?;
    match settings.raw("out") {
        Some(path) => {
            let path = Path::new(path);
            write_file(path, &csv)?;
            write_file(&path.with_extension("report.txt"), &outcome.report)?;
            writeln!(out, "wrote {}", path.display()).map_err(io)?;
        }
        None => {
            out.write_all(b"\n").map_err(io)?;
            out.write_all(csv.as_bytes()).map_err(io)?;
        }
    }
    Ok(outcome.falsified)
}

/// Run with explicit output streams; returns the exit code.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_INVALID,
            };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    let Some((name, sub)) = matches.subcommand() else {
        let _ = writeln!(err, "error: missing command");
        return EXIT_INVALID;
    };
    let result = execute(name, sub, out);
    match &result {
        Ok(Some(what)) => {
            let _ = writeln!(err, "falsified: {what}");
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
        }
        Ok(None) => {}
    }
    exit_code(&result)
}

/// Exit code of a finished command: falsification outranks success, errors are validation failures.
pub fn exit_code(result: &Result<Option<String>, CliError>) -> i32 {
    match result {
        Ok(None) => EXIT_OK,
        Ok(Some(_)) => EXIT_FALSIFIED,
        Err(_) => EXIT_INVALID,
    }
}

/// Run against the process streams.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(args, &mut stdout.lock(), &mut stderr.lock())
}
