use thiserror::Error;

/// Errors raised by the laboratory operations.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum LabError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unsupported dimension d={0}")]
    UnsupportedDimension(usize),

    #[error("envelope tail is not integrable: q(d+1)/2 = {exponent} must exceed d = {dim}")]
    NonIntegrableTail { exponent: f64, dim: usize },

    #[error("frequency {xi} exceeds the grid's resolvable frequency {nyquist}")]
    GridTooCoarse { xi: f64, nyquist: f64 },

    #[error("tolerance {tol} needs truncation radius {required} beyond resolvable frequency {nyquist}")]
    ToleranceUnachievable { tol: f64, required: f64, nyquist: f64 },

    #[error(
        "Hankel inversion did not converge: doubled truncation radius changed values by {change} (tolerance {tol})"
    )]
    NonConvergent { change: f64, tol: f64 },

    #[error("kernel value {value} at the last node r={r} exceeds tail tolerance {tol}")]
    TailNotNegligible { r: f64, value: f64, tol: f64 },

    #[error("kernel K_q is not positive on the unit ball (min {min}); q={q} is outside the validated range")]
    NonPositiveKernel { q: f64, min: f64 },

    #[error("q={0} is outside the validated neighborhood of an even integer >= 4")]
    OutsideValidatedRange(f64),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("malformed input at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, LabError>;
