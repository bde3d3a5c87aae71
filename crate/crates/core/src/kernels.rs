//! Kernels `K_q` and `L_q` with `K_q^ = |1_B^|^{q-2} 1_B^` and `L_q^ = |1_B^|^{q-2}`.
//!
//! Both are computed by radial (Hankel) inversion of their symbols. In dimension one
//! the symbol is `P(2 pi rho) (pi rho)^{-p}` with `P` periodic, so the part beyond the
//! truncation radius is summed exactly from the Fourier series of `P` and the power-law
//! tail integrals `int_Xi^inf e^{i w rho} rho^{-p} d rho`. In dimension two the mean of the
//! leading Bessel asymptotics is integrated analytically and the remainder is bounded
//! empirically by doubling the truncation radius.
//!
//! For even `q = 2m` the kernels are iterated convolutions of the ball indicator,
//! `K_q = 1_B^{*(2m-1)}` and `L_q = 1_B^{*(2m-2)}`, which [`convolution_oracle`] evaluates
//! directly in space.

use crate::error::{LabError, Result};
use crate::interp::MonotoneCubic;
use crate::piecewise::{convolution_power, PiecewisePoly};
use crate::radial_fourier::ball_transform;
use crate::report::{fmt12, parse_header_fields};
use crate::special::{
    bessel_j0, bessel_j1_zero, gauss_legendre, oscillatory_power_tail, oscillatory_power_tail_bound, sine_moment,
};
use num_complex::Complex64;
use rayon::prelude::*;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::sync::{Arc, Mutex, OnceLock};

/// Which kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelKind {
    K,
    L,
}

impl KernelKind {
    pub fn name(&self) -> &'static str {
        match self {
            KernelKind::K => "K",
            KernelKind::L => "L",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "K" | "k" => Some(KernelKind::K),
            "L" | "l" => Some(KernelKind::L),
            _ => None,
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Default truncation radius of the frequency integral in dimension one.
pub const D1_TRUNCATION: f64 = 32.0;
/// Default truncation radius of the frequency integral in dimension two.
pub const D2_TRUNCATION: f64 = 64.0;
/// Allowed change under doubling of the truncation radius (dimension one).
pub const D1_CONVERGENCE_TOL: f64 = 1e-8;
/// Allowed change under doubling of the truncation radius (dimension two).
pub const D2_CONVERGENCE_TOL: f64 = 1e-4;
/// Default tolerance for the last sampled kernel value.
pub const TAIL_TOLERANCE: f64 = 1e-4;

/// Largest radius the sampled kernel is extended to.
pub const MAX_TAIL_RADIUS: f64 = 48.0;
/// Radial spacing used beyond the initial grid.
pub const OUTER_STEP: f64 = 1.0 / 16.0;

/// Largest accepted gap between the interpolant and the inversion quadrature at a cell midpoint.
pub const INTERP_TOLERANCE: f64 = 1e-5;
/// Bisection rounds available to reach [`INTERP_TOLERANCE`] near kinks.
const MAX_REFINEMENTS: usize = 8;
const D1_PANEL: f64 = 0.25;
const D1_NODES: usize = 32;
const D2_NODES: usize = 24;
const SERIES_TERMS: usize = 400;

/// Symbol `|F|^{q-2} F^s` with `F = 1_B^`, `s = 1` for `K` and `0` for `L`.
pub fn kernel_symbol(kind: KernelKind, q: f64, d: usize, rho: f64) -> f64 {
    let f = ball_transform(d, rho);
    let base = (f * f).powf(0.5 * (q - 2.0));
    match kind {
        KernelKind::K => base * f,
        KernelKind::L => base,
    }
}

/// Even integer `m >= 4` with `|q - m| <= 0.25`, if any.
pub fn validated_even_neighbor(q: f64) -> Option<u32> {
    let m = (q / 2.0).round() * 2.0;
    (m >= 4.0 && (q - m).abs() <= 0.25).then_some(m as u32)
}

fn check_params(q: f64, d: usize) -> Result<()> {
    if d != 1 && d != 2 {
        return Err(LabError::UnsupportedDimension(d));
    }
    if !(q > 3.0) || !q.is_finite() {
        return Err(LabError::InvalidParameter(format!("kernels need q > 3, got {q}")));
    }
    if d == 2 && q <= 10.0 / 3.0 {
        return Err(LabError::InvalidParameter(format!("in the plane L_q(0) is finite only for q > 10/3, got {q}")));
    }
    Ok(())
}

/// Fourier series of the periodic factor of the one-dimensional symbol.
#[derive(Debug, Clone)]
struct LineTail {
    kind: KernelKind,
    p: f64,
    prefactor: f64,
    dc: f64,
    /// `(frequency multiple, coefficient)`; multiples of `2 pi rho`.
    terms: Vec<(f64, f64)>,
    /// Bound on the neglected series terms at the truncation radius.
    truncation: f64,
}

impl LineTail {
    fn new(kind: KernelKind, q: f64, xi: f64, r_max: f64) -> Self {
        let mut terms = Vec::new();
        let (p, dc, nu) = match kind {
            KernelKind::L => {
                let nu = q - 2.0;
                (nu, 2.0 * sine_moment(nu, 0.0) / PI, nu)
            }
            KernelKind::K => (q - 1.0, 0.0, q - 1.0),
        };
        for k in 1..=SERIES_TERMS {
            let kf = k as f64;
            let (m, c) = match kind {
                KernelKind::L => (2.0 * kf, 2.0 / PI * if k % 2 == 0 { 1.0 } else { -1.0 } * sine_moment(nu, 2.0 * kf)),
                KernelKind::K => {
                    if k % 2 == 0 {
                        continue;
                    }
                    let s = if k % 4 == 1 { 1.0 } else { -1.0 };
                    (kf, 2.0 / PI * s * sine_moment(nu, kf))
                }
            };
            if c != 0.0 {
                terms.push((m, c));
            }
        }
        // Neglected terms decay like m^{-(nu+1)}; extrapolate from the last retained one.
        let truncation = match terms.last() {
            Some(&(m_last, c_last)) if m_last >= (SERIES_TERMS - 2) as f64 => {
                let mut s = 0.0;
                let step = 2.0;
                let mut m = m_last + step;
                while m < 1e6 {
                    let c = c_last.abs() * (m_last / m).powf(nu + 1.0);
                    s += c * 2.0 * oscillatory_power_tail_bound(2.0 * PI * (m - r_max).max(1.0), xi, p);
                    m += step;
                }
                s * PI.powf(-p)
            }
            _ => 0.0,
        };
        Self { kind, p, prefactor: PI.powf(-p), dc, terms, truncation }
    }

    fn eval(&self, r: f64, xi: f64) -> f64 {
        let w = 2.0 * PI;
        let pick = |z: Complex64| match self.kind {
            KernelKind::L => z.re,
            KernelKind::K => z.im,
        };
        let mut s = 0.0;
        if self.dc != 0.0 {
            s += self.dc * oscillatory_power_tail(w * r, xi, self.p).re;
        }
        for &(m, c) in &self.terms {
            let a = oscillatory_power_tail(w * (m + r), xi, self.p);
            let b = oscillatory_power_tail(w * (m - r), xi, self.p);
            s += c * (pick(a) + pick(b));
        }
        self.prefactor * s
    }
}

/// `int_a^inf J_0(omega rho) rho^{-mu} d rho` for `mu > 1/2` (`mu > 1` when `omega = 0`).
pub fn bessel0_power_tail(omega: f64, a: f64, mu: f64) -> f64 {
    const SWITCH: f64 = 30.0;
    let omega = omega.abs();
    if omega == 0.0 {
        return a.powf(1.0 - mu) / (mu - 1.0);
    }
    let asymptotic = |from: f64| -> f64 {
        // J_0(x) ~ sqrt(2/(pi x)) [P cos(x - pi/4) - Q sin(x - pi/4)],
        // P ~ 1 - 9/(128 x^2), Q ~ -1/(8x) + 75/(1024 x^3).
        let rot = Complex64::from_polar(1.0, -PI / 4.0);
        let i = |s: f64| rot * oscillatory_power_tail(omega, from, s);
        let c0 = i(mu + 0.5).re;
        let c2 = i(mu + 2.5).re;
        let s1 = i(mu + 1.5).im;
        let s3 = i(mu + 3.5).im;
        (2.0 / (PI * omega)).sqrt()
            * (c0 - 9.0 / (128.0 * omega * omega) * c2 + s1 / (8.0 * omega) - 75.0 / (1024.0 * omega.powi(3)) * s3)
    };
    if omega * a >= SWITCH {
        return asymptotic(a);
    }
    let b = SWITCH / omega;
    let rule = gauss_legendre(24);
    let mut s = 0.0;
    let mut x = a;
    while x < b {
        let next = (2.0 * x).min(x + 2.0 / omega).min(b);
        for (rho, w) in rule.on(x, next) {
            s += w * bessel_j0(omega * rho) * rho.powf(-mu);
        }
        x = next;
    }
    s + asymptotic(b)
}

#[derive(Debug, Clone)]
enum Tail {
    Line(LineTail),
    PlaneMean { coef: f64, mu: f64 },
    Zero,
}

/// Quadrature for `K(r) = int S(|xi|) e^{2 pi i x.xi} d xi` at `|x| = r`, truncated at `xi`
/// plus the analytic tail model.
#[derive(Debug, Clone)]
pub struct HankelInverter {
    pub q: f64,
    pub d: usize,
    pub kind: KernelKind,
    pub truncation: f64,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    tail: Tail,
}

impl HankelInverter {
    /// Quadrature with truncation radius near `xi_target` (aligned to symbol zeros).
    pub fn new(kind: KernelKind, q: f64, d: usize, xi_target: f64, r_max: f64) -> Result<Self> {
        check_params(q, d)?;
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        if d == 1 {
            let panels = (xi_target / D1_PANEL).round().max(4.0) as usize;
            let rule = gauss_legendre(D1_NODES);
            for j in 0..panels {
                let a = j as f64 * D1_PANEL;
                for (rho, w) in rule.on(a, a + D1_PANEL) {
                    nodes.push(rho);
                    weights.push(2.0 * w * kernel_symbol(kind, q, 1, rho));
                }
            }
            let truncation = panels as f64 * D1_PANEL;
            let tail = Tail::Line(LineTail::new(kind, q, truncation, r_max));
            Ok(Self { q, d, kind, truncation, nodes, weights, tail })
        } else {
            let rule = gauss_legendre(D2_NODES);
            let mut a = 0.0;
            let mut k = 1;
            loop {
                let z = bessel_j1_zero(k) / (2.0 * PI);
                if z > xi_target && k > 4 {
                    break;
                }
                let mid = 0.5 * (a + z);
                for (lo, hi) in [(a, mid), (mid, z)] {
                    for (rho, w) in rule.on(lo, hi) {
                        nodes.push(rho);
                        weights.push(2.0 * PI * w * rho * kernel_symbol(kind, q, 2, rho));
                    }
                }
                a = z;
                k += 1;
            }
            let tail = match kind {
                KernelKind::L => {
                    let nu = q - 2.0;
                    let a0 = sine_moment(nu, 0.0) / PI;
                    Tail::PlaneMean { coef: 2.0 * PI * a0 * PI.powf(-nu), mu: 1.5 * nu - 1.0 }
                }
                KernelKind::K => Tail::Zero,
            };
            Ok(Self { q, d, kind, truncation: a, nodes, weights, tail })
        }
    }

    /// Bound on the neglected Fourier-series terms (dimension one); zero otherwise.
    pub fn series_truncation_bound(&self) -> f64 {
        match &self.tail {
            Tail::Line(t) => t.truncation,
            _ => 0.0,
        }
    }

    pub fn eval(&self, r: f64) -> f64 {
        let r = r.abs();
        let w = 2.0 * PI * r;
        let direct: f64 = if self.d == 1 {
            self.nodes.iter().zip(&self.weights).map(|(rho, c)| c * (w * rho).cos()).sum()
        } else {
            self.nodes.iter().zip(&self.weights).map(|(rho, c)| c * bessel_j0(w * rho)).sum()
        };
        let tail = match &self.tail {
            Tail::Line(t) => t.eval(r, self.truncation),
            Tail::PlaneMean { coef, mu } => coef * bessel0_power_tail(w, self.truncation, *mu),
            Tail::Zero => 0.0,
        };
        direct + tail
    }
}

/// Radial sampling grid `0, step, 2 step, ..., r_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadialGrid {
    pub r_max: f64,
    pub step: f64,
}

impl RadialGrid {
    /// Reaches `q + 1` with spacing 1/128.
    pub fn default_for(q: f64) -> Self {
        RadialGrid { r_max: (q + 1.0).ceil(), step: 1.0 / 128.0 }
    }

    pub fn points(&self) -> Vec<f64> {
        let n = (self.r_max / self.step).round() as usize;
        (0..=n).map(|k| k as f64 * self.step).collect()
    }
}

/// Construction options.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelOptions {
    /// Frequency truncation radius; default by dimension.
    pub truncation: Option<f64>,
    /// Tolerance for the largest |value| on the last unit of the radial grid.
    pub tail_tolerance: f64,
}

impl Default for KernelOptions {
    fn default() -> Self {
        KernelOptions { truncation: None, tail_tolerance: TAIL_TOLERANCE }
    }
}

/// Radially sampled kernel with monotone cubic interpolation.
#[derive(Clone)]
pub struct Kernel {
    pub q: f64,
    pub d: usize,
    pub kind: KernelKind,
    pub r: Vec<f64>,
    pub values: Vec<f64>,
    interp: MonotoneCubic,
    /// Beyond this radius the kernel is treated as zero.
    pub tail_radius: f64,
    /// Bound for the frequency truncation of the inversion integral.
    pub tail_bound: f64,
    /// Largest |value| over the last unit of the grid; bounds the zero-extension error.
    pub cutoff_value: f64,
    /// Declared tolerance for `cutoff_value`.
    pub tolerance: f64,
    pub truncation: f64,
    /// Largest midpoint gap between the interpolant and the inversion quadrature.
    pub interp_error: f64,
    inverter: Option<Arc<HankelInverter>>,
}

impl fmt::Debug for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Kernel")
            .field("q", &self.q)
            .field("d", &self.d)
            .field("kind", &self.kind)
            .field("nodes", &self.r.len())
            .field("tail_radius", &self.tail_radius)
            .field("tail_bound", &self.tail_bound)
            .field("cutoff_value", &self.cutoff_value)
            .finish()
    }
}

impl Kernel {
    /// Interpolated value at radius `|r|`; zero beyond the tail radius.
    pub fn value(&self, r: f64) -> f64 {
        let r = r.abs();
        if r > self.tail_radius {
            0.0
        } else {
            self.interp.eval(r)
        }
    }

    /// Value from the inversion quadrature when available, otherwise interpolated.
    pub fn exact(&self, r: f64) -> f64 {
        match &self.inverter {
            Some(inv) if r.abs() <= self.tail_radius => inv.eval(r),
            Some(_) => 0.0,
            None => self.value(r),
        }
    }

    /// Value at a point of `R^d`.
    pub fn at(&self, x: &[f64; 2]) -> f64 {
        self.value(x[0].hypot(x[1]))
    }

    pub fn has_inverter(&self) -> bool {
        self.inverter.is_some()
    }

    /// Total error bound to carry into downstream budgets.
    pub fn error_bound(&self) -> f64 {
        self.tail_bound + self.cutoff_value + self.interp_error
    }

    /// CSV with a `#` header line carrying the metadata, then `r,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# hylab-kernel q={} d={} kind={} tail_radius={} tail_bound={} tolerance={} truncation={} cutoff={} interp={}\nr,value\n",
            fmt12(self.q),
            self.d,
            self.kind,
            fmt12(self.tail_radius),
            fmt12(self.tail_bound),
            fmt12(self.tolerance),
            fmt12(self.truncation),
            fmt12(self.cutoff_value),
            fmt12(self.interp_error),
        );
        for (r, v) in self.r.iter().zip(&self.values) {
            out.push_str(&fmt12(*r));
            out.push(',');
            out.push_str(&fmt12(*v));
            out.push('\n');
        }
        out
    }

    /// Parse the CSV schema written by [`Kernel::to_csv`].
    pub fn from_csv(text: &str) -> Result<Kernel> {
        let err = |line: usize, msg: &str| LabError::Parse { line, msg: msg.to_string() };
        // Leading comment lines (such as a run header) are skipped.
        let mut lines =
            text.lines().enumerate().skip_while(|(_, l)| l.starts_with('#') && !l.starts_with("# hylab-kernel"));
        let (at, header) = lines.next().ok_or_else(|| err(1, "missing '# hylab-kernel' header"))?;
        let head = at + 1;
        if !header.starts_with("# hylab-kernel") {
            return Err(err(head, "expected '# hylab-kernel' header"));
        }
        let fields: HashMap<String, String> = parse_header_fields(header).into_iter().collect();
        let num = |key: &str| -> Result<f64> {
            let v = fields.get(key).ok_or_else(|| err(head, &format!("missing header key '{key}'")))?;
            let x: f64 = v.parse().map_err(|_| err(head, &format!("bad number for '{key}': {v}")))?;
            if x.is_finite() {
                Ok(x)
            } else {
                Err(err(head, &format!("non-finite value for '{key}'")))
            }
        };
        let q = num("q")?;
        let d = num("d")?;
        if d != 1.0 && d != 2.0 {
            return Err(err(head, "d must be 1 or 2"));
        }
        let kind =
            fields.get("kind").and_then(|k| KernelKind::parse(k)).ok_or_else(|| err(head, "kind must be K or L"))?;
        let tail_radius = num("tail_radius")?;
        let tail_bound = num("tail_bound")?;
        let tolerance = num("tolerance")?;
        let truncation = fields.get("truncation").map_or(Ok(0.0), |_| num("truncation"))?;
        let cutoff_value = fields.get("cutoff").map_or(Ok(0.0), |_| num("cutoff"))?;
        let interp_error = fields.get("interp").map_or(Ok(0.0), |_| num("interp"))?;
        match lines.next() {
            Some((_, cols)) if cols.trim() == "r,value" => {}
            Some((i, _)) => return Err(err(i + 1, "expected column header 'r,value'")),
            None => return Err(err(head + 1, "missing column header")),
        }
        let mut r = Vec::new();
        let mut values = Vec::new();
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (a, b) = line.split_once(',').ok_or_else(|| err(i + 1, "expected two columns"))?;
            let x: f64 = a.trim().parse().map_err(|_| err(i + 1, "bad radius"))?;
            let y: f64 = b.trim().parse().map_err(|_| err(i + 1, "bad value"))?;
            if !x.is_finite() || !y.is_finite() {
                return Err(err(i + 1, "non-finite entry"));
            }
            if r.last().is_some_and(|&prev| x <= prev) || x < 0.0 {
                return Err(err(i + 1, "radii must be non-negative and strictly increasing"));
            }
            r.push(x);
            values.push(y);
        }
        if r.len() < 2 {
            return Err(err(text.lines().count(), "need at least two rows"));
        }
        let interp = MonotoneCubic::new(r.clone(), values.clone());
        Ok(Kernel {
            q,
            d: d as usize,
            kind,
            r,
            values,
            interp,
            tail_radius,
            tail_bound,
            cutoff_value,
            tolerance,
            truncation,
            interp_error,
            inverter: None,
        })
    }
}

/// `K_q` on the given radial grid.
#[allow(non_snake_case)]
pub fn kernel_K(q: f64, d: usize, grid: RadialGrid) -> Result<Kernel> {
    build_kernel(KernelKind::K, q, d, grid, KernelOptions::default())
}

/// `L_q` on the given radial grid.
#[allow(non_snake_case)]
pub fn kernel_L(q: f64, d: usize, grid: RadialGrid) -> Result<Kernel> {
    build_kernel(KernelKind::L, q, d, grid, KernelOptions::default())
}

/// Construct a kernel, checking agreement with a doubled truncation radius.
pub fn build_kernel(kind: KernelKind, q: f64, d: usize, grid: RadialGrid, opts: KernelOptions) -> Result<Kernel> {
    check_params(q, d)?;
    if grid.r_max < q {
        return Err(LabError::InvalidParameter(format!("radial grid must reach r = q = {q}, got {}", grid.r_max)));
    }
    if !(grid.step > 0.0) {
        return Err(LabError::InvalidParameter("radial step must be positive".into()));
    }
    let xi = opts.truncation.unwrap_or(if d == 1 { D1_TRUNCATION } else { D2_TRUNCATION });
    let inv = HankelInverter::new(kind, q, d, xi, grid.r_max.max(MAX_TAIL_RADIUS))?;
    let inv2 = HankelInverter::new(kind, q, d, 2.0 * xi, grid.r_max.max(MAX_TAIL_RADIUS))?;
    let mut r = grid.points();
    let mut values: Vec<f64> = r.par_iter().map(|&x| inv.eval(x)).collect();
    let mut change = max_change(&values, &r, &inv2);
    let mut cutoff_value = last_unit_max(&r, &values);
    // Non-even q gives kernels with algebraic decay; extend on a coarser grid until negligible.
    while cutoff_value > opts.tail_tolerance && *r.last().unwrap() < MAX_TAIL_RADIUS {
        let last = *r.last().unwrap();
        let end = (2.0 * last).min(MAX_TAIL_RADIUS);
        let count = ((end - last) / OUTER_STEP).round() as usize;
        let extra: Vec<f64> = (1..=count).map(|k| last + k as f64 * OUTER_STEP).collect();
        let extra_values: Vec<f64> = extra.par_iter().map(|&x| inv.eval(x)).collect();
        change = change.max(max_change(&extra_values, &extra, &inv2));
        r.extend(extra);
        values.extend(extra_values);
        cutoff_value = last_unit_max(&r, &values);
    }
    let tol = if d == 1 { D1_CONVERGENCE_TOL } else { D2_CONVERGENCE_TOL };
    if change > tol {
        return Err(LabError::NonConvergent { change, tol });
    }
    let tail_bound = change + inv.series_truncation_bound();
    let last = *r.last().unwrap();
    if cutoff_value > opts.tail_tolerance {
        return Err(LabError::TailNotNegligible { r: last, value: cutoff_value, tol: opts.tail_tolerance });
    }
    let interp_error = refine(&mut r, &mut values, &inv);
    if kind == KernelKind::K && validated_even_neighbor(q).is_some() {
        let min = r.iter().zip(&values).filter(|(x, _)| **x <= 2.0).map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
        if !(min > 0.0) {
            return Err(LabError::NonPositiveKernel { q, min });
        }
    }
    let interp = MonotoneCubic::new(r.clone(), values.clone());
    Ok(Kernel {
        q,
        d,
        kind,
        r,
        values,
        interp,
        tail_radius: last,
        tail_bound,
        cutoff_value,
        tolerance: opts.tail_tolerance,
        truncation: inv.truncation,
        interp_error,
        inverter: Some(Arc::new(inv)),
    })
}

/// Bisect cells whose interpolated midpoint misses the quadrature by more than
/// [`INTERP_TOLERANCE`], rechecking only cells near inserted nodes. Returns the largest
/// midpoint gap left after the last round.
fn refine(r: &mut Vec<f64>, values: &mut Vec<f64>, inv: &HankelInverter) -> f64 {
    let mut check: Vec<usize> = (0..r.len() - 1).collect();
    let mut worst = 0.0;
    for round in 0..=MAX_REFINEMENTS {
        let interp = MonotoneCubic::new(r.clone(), values.clone());
        let gaps: Vec<(usize, f64, f64, f64)> = check
            .par_iter()
            .map(|&i| {
                let m = 0.5 * (r[i] + r[i + 1]);
                let v = inv.eval(m);
                (i, m, v, (interp.eval(m) - v).abs())
            })
            .collect();
        worst = gaps.iter().map(|g| g.3).fold(0.0, f64::max);
        let bad: Vec<&(usize, f64, f64, f64)> = gaps.iter().filter(|g| g.3 > INTERP_TOLERANCE).collect();
        if bad.is_empty() || round == MAX_REFINEMENTS {
            break;
        }
        let mut nodes: Vec<(f64, f64)> = r.iter().copied().zip(values.iter().copied()).collect();
        nodes.extend(bad.iter().map(|g| (g.1, g.2)));
        nodes.sort_by(|a, b| a.0.total_cmp(&b.0));
        let added: Vec<f64> = bad.iter().map(|g| g.1).collect();
        (*r, *values) = nodes.into_iter().unzip();
        // Slopes change up to two cells away from a new node.
        check = (0..r.len() - 1)
            .filter(|&i| {
                let lo = r[i.saturating_sub(2)];
                let hi = r[(i + 3).min(r.len() - 1)];
                added.iter().any(|&a| a >= lo && a <= hi)
            })
            .collect();
    }
    worst
}

fn max_change(values: &[f64], r: &[f64], doubled: &HankelInverter) -> f64 {
    r.par_iter().zip(values).map(|(&x, v)| (doubled.eval(x) - v).abs()).reduce(|| 0.0, f64::max)
}

fn last_unit_max(r: &[f64], values: &[f64]) -> f64 {
    let last = *r.last().unwrap();
    r.iter().zip(values).filter(|(x, _)| **x >= last - 1.0).map(|(_, v)| v.abs()).fold(0.0, f64::max)
}

/// Radial profile of `1_B^{*n}` in the plane, tabulated on a fine grid.
struct PlaneTable {
    n: usize,
    interp: MonotoneCubic,
}

const PLANE_TABLE_STEP: f64 = 1.0 / 256.0;
const PLANE_NODES: usize = 48;

/// Area of the intersection of two unit disks at distance `r`.
pub fn lens_area(r: f64) -> f64 {
    let r = r.abs();
    if r >= 2.0 {
        0.0
    } else {
        2.0 * (r / 2.0).acos() - 0.5 * r * (4.0 - r * r).sqrt()
    }
}

/// Length of the circle `|y| = s` inside the unit disk centered at distance `r`.
fn arc_inside(s: f64, r: f64) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    if r == 0.0 {
        return if s <= 1.0 { 2.0 * PI * s } else { 0.0 };
    }
    let c = ((s * s + r * r - 1.0) / (2.0 * r * s)).clamp(-1.0, 1.0);
    2.0 * s * c.acos()
}

/// `(phi * 1_B)(r)` for a radial `phi` supported in `[0, support]` with kinks at integers.
fn convolve_with_disk(phi: &dyn Fn(f64) -> f64, support: f64, r: f64) -> f64 {
    let lo = (r - 1.0).max(0.0);
    let hi = (r + 1.0).min(support);
    if hi <= lo {
        return 0.0;
    }
    let mut bps = vec![lo, hi, (1.0 - r).abs()];
    let mut k = 1.0;
    while k < support {
        bps.push(k);
        k += 1.0;
    }
    bps.retain(|&b| b >= lo && b <= hi);
    bps.sort_by(f64::total_cmp);
    bps.dedup_by(|a, b| (*a - *b).abs() < 1e-14);
    let rule = gauss_legendre(PLANE_NODES);
    let mut s = 0.0;
    for w in bps.windows(2) {
        let (a, b) = (w[0], w[1]);
        // s = a + (b - a)(1 - cos(pi t))/2 clusters nodes at both ends.
        for (t, wt) in rule.on(0.0, 1.0) {
            let x = a + (b - a) * 0.5 * (1.0 - (PI * t).cos());
            let jac = (b - a) * 0.5 * PI * (PI * t).sin();
            s += wt * jac * phi(x) * arc_inside(x, r);
        }
    }
    s
}

fn plane_table(n: usize) -> Arc<PlaneTable> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<PlaneTable>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(t) = cache.lock().expect("table cache poisoned").get(&n) {
        return t.clone();
    }
    assert!(n >= 3);
    let prev: Box<dyn Fn(f64) -> f64 + Send + Sync> = if n == 3 {
        Box::new(lens_area)
    } else {
        let t = plane_table(n - 1);
        Box::new(move |x| if x > (t.n as f64) { 0.0 } else { t.interp.eval(x) })
    };
    let support = n as f64;
    let count = (support / PLANE_TABLE_STEP).round() as usize;
    let r: Vec<f64> = (0..=count).map(|k| k as f64 * PLANE_TABLE_STEP).collect();
    let values: Vec<f64> = r.par_iter().map(|&x| convolve_with_disk(&*prev, support - 1.0, x)).collect();
    let table = Arc::new(PlaneTable { n, interp: MonotoneCubic::new(r, values) });
    cache.lock().expect("table cache poisoned").entry(n).or_insert(table).clone()
}

fn line_power(n: usize) -> Arc<PiecewisePoly> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<PiecewisePoly>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    cache
        .lock()
        .expect("poly cache poisoned")
        .entry(n)
        .or_insert_with(|| Arc::new(convolution_power(&[(-1.0, 1.0)], n)))
        .clone()
}

/// `1_B^{*n}` at radius `r` in dimension `d`.
pub fn ball_convolution_power(n: usize, d: usize, r: f64) -> Result<f64> {
    let r = r.abs();
    match (d, n) {
        (1, _) if n >= 1 => Ok(line_power(n).eval(r)),
        (2, 1) => Ok(if r <= 1.0 { 1.0 } else { 0.0 }),
        (2, 2) => Ok(lens_area(r)),
        (2, _) if n >= 3 => {
            if r >= n as f64 {
                return Ok(0.0);
            }
            Ok(plane_table(n).interp.eval(r))
        }
        (1 | 2, _) => Err(LabError::InvalidParameter("convolution power needs n >= 1".into())),
        _ => Err(LabError::UnsupportedDimension(d)),
    }
}

/// Spatial ground truth for even `q = 2m`: `K_q = 1_B^{*(q-1)}`, `L_q = 1_B^{*(q-2)}`.
pub fn convolution_oracle(kind: KernelKind, q: f64, d: usize, r: f64) -> Result<f64> {
    if !(q >= 4.0 && q.fract() == 0.0 && (q as u64).is_multiple_of(2)) {
        return Err(LabError::InvalidParameter(format!("convolution oracle needs even q >= 4, got {q}")));
    }
    let n = match kind {
        KernelKind::K => q as usize - 1,
        KernelKind::L => q as usize - 2,
    };
    ball_convolution_power(n, d, r)
}

/// Result of the monotonicity and separation checks for `K_q`.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneReport {
    pub q: f64,
    pub d: usize,
    pub even_neighbor: u32,
    pub samples: usize,
    /// Largest forward difference of `K_q` over `(0, m-1)`.
    pub max_forward_difference: f64,
    pub noise_tolerance: f64,
    pub monotone: bool,
    /// `(delta, min_{r <= 1-delta} K, max_{r >= 1+delta} K, holds)`.
    pub separation: Vec<(f64, f64, f64, bool)>,
}

impl MonotoneReport {
    pub fn passed(&self) -> bool {
        self.monotone && self.separation.iter().all(|s| s.3)
    }
}

/// Sample `K_q` on `(0, m-1)` for the even integer `m` near `q`.
#[allow(non_snake_case)]
pub fn check_K_monotone(q: f64, d: usize) -> Result<MonotoneReport> {
    let m = validated_even_neighbor(q).ok_or(LabError::OutsideValidatedRange(q))?;
    let mf = m as f64;
    let grid = RadialGrid { r_max: (mf + 1.0).max((q + 1.0).ceil()), step: 1.0 / 128.0 };
    let kernel = kernel_K(q, d, grid)?;
    let samples = 600;
    let noise_tolerance = 1e-3 * kernel.error_bound().max(1e-12);
    let rs: Vec<f64> = (1..samples).map(|i| i as f64 * (mf - 1.0) / samples as f64).collect();
    let vals: Vec<f64> = rs.par_iter().map(|&x| kernel.exact(x)).collect();
    let max_forward_difference = vals.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    let monotone = max_forward_difference < -noise_tolerance;
    let mut separation = Vec::new();
    for delta in [0.05, 0.1, 0.2] {
        let inner: Vec<f64> = (0..=200).map(|i| i as f64 * (1.0 - delta) / 200.0).collect();
        let outer_hi = kernel.tail_radius;
        let outer: Vec<f64> = (0..=400).map(|i| 1.0 + delta + i as f64 * (outer_hi - 1.0 - delta) / 400.0).collect();
        let min_in = inner.par_iter().map(|&x| kernel.exact(x)).reduce(|| f64::INFINITY, f64::min);
        let max_out = outer.par_iter().map(|&x| kernel.exact(x)).reduce(|| f64::NEG_INFINITY, f64::max);
        separation.push((delta, min_in, max_out, min_in > max_out));
    }
    Ok(MonotoneReport {
        q,
        d,
        even_neighbor: m,
        samples,
        max_forward_difference,
        noise_tolerance,
        monotone,
        separation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fourier_coefficients_of_periodic_factor() {
        let t = LineTail::new(KernelKind::L, 4.0, 32.0, 5.0);
        assert!((t.dc - 1.0).abs() < 1e-14);
        assert_eq!(t.terms.len(), 1);
        assert!((t.terms[0].1 + 0.5).abs() < 1e-14);
        let t = LineTail::new(KernelKind::K, 4.0, 32.0, 5.0);
        assert_eq!(t.terms.len(), 2);
        assert!((t.terms[0].1 - 0.75).abs() < 1e-14);
        assert!((t.terms[1].1 + 0.25).abs() < 1e-14);
        assert_eq!(t.truncation, 0.0);
    }

    #[test]
    fn periodic_factor_series_reconstructs_symbol_numerator() {
        for &q in &[3.95, 4.05, 5.0] {
            for kind in [KernelKind::K, KernelKind::L] {
                let t = LineTail::new(kind, q, 32.0, 5.0);
                for k in 0..50 {
                    let theta = 0.1 + k as f64 * 0.123;
                    let s = theta.sin();
                    let exact = match kind {
                        KernelKind::L => s.abs().powf(q - 2.0),
                        KernelKind::K => s.abs().powf(q - 2.0) * s,
                    };
                    let series: f64 = 0.5 * t.dc
                        + t.terms
                            .iter()
                            .map(|&(m, c)| match kind {
                                KernelKind::L => c * (m * theta).cos(),
                                KernelKind::K => c * (m * theta).sin(),
                            })
                            .sum::<f64>();
                    assert!((series - exact).abs() < 1e-6, "q={q} {kind} theta={theta} {series} {exact}");
                }
            }
        }
    }

    #[test]
    fn bessel_tail_matches_direct_integration() {
        for &(omega, a, mu) in &[(0.0, 5.0, 2.0), (2.0, 10.0, 2.0), (20.0, 3.0, 1.5), (0.5, 2.0, 2.0)] {
            let v = bessel0_power_tail(omega, a, mu);
            let rule = gauss_legendre(24);
            let mut s = 0.0;
            let mut x = a;
            let end = 3000.0;
            while x < end {
                let next = x + 0.25;
                for (rho, w) in rule.on(x, next) {
                    s += w * bessel_j0(omega * rho) * rho.powf(-mu);
                }
                x = next;
            }
            s += if omega == 0.0 { end.powf(1.0 - mu) / (mu - 1.0) } else { bessel0_power_tail(omega, end, mu) };
            assert!((v - s).abs() < 1e-9, "omega={omega}: {v} vs {s}");
        }
    }

    #[test]
    fn line_kernels_match_convolution_oracle() {
        for q in [4.0, 6.0] {
            for kind in [KernelKind::K, KernelKind::L] {
                let k = build_kernel(kind, q, 1, RadialGrid::default_for(q), KernelOptions::default()).unwrap();
                let mut worst: f64 = 0.0;
                // Dense enough to land inside the cells next to each kink.
                for i in 0..=4000 {
                    let r = i as f64 * (q - 1.0) / 4000.0;
                    let o = convolution_oracle(kind, q, 1, r).unwrap();
                    worst = worst.max((k.exact(r) - o).abs()).max((k.value(r) - o).abs());
                }
                assert!(worst < 1e-4, "q={q} {kind}: {worst}");
                assert!(k.tail_bound < 1e-8, "tail bound {}", k.tail_bound);
                assert!(k.interp_error <= INTERP_TOLERANCE, "interp error {}", k.interp_error);
            }
        }
    }

    #[test]
    fn kernel_examples() {
        let k = kernel_K(4.0, 1, RadialGrid::default_for(4.0)).unwrap();
        assert!((k.exact(0.0) - 3.0).abs() < 1e-9);
        assert!(k.exact(3.5).abs() < 1e-9);
        assert!((k.exact(1.0) - 2.0).abs() < 1e-9);
        let l = kernel_L(4.0, 1, RadialGrid::default_for(4.0)).unwrap();
        assert!((l.exact(0.0) - 2.0).abs() < 1e-9);
        assert!(l.exact(2.5).abs() < 1e-9);
        assert_eq!(l.value(0.731), l.value(-0.731));
        assert!((convolution_oracle(KernelKind::L, 4.0, 1, 1.0).unwrap() - 1.0).abs() < 1e-14);
        assert!((convolution_oracle(KernelKind::K, 4.0, 1, 0.0).unwrap() - 3.0).abs() < 1e-14);
        assert!((convolution_oracle(KernelKind::L, 4.0, 2, 0.0).unwrap() - PI).abs() < 1e-14);
        assert!(convolution_oracle(KernelKind::K, 5.0, 1, 0.0).is_err());
    }

    #[test]
    fn plane_oracle_mass_is_multiplicative() {
        // int 1_B^{*3} = pi^3
        let n = 3;
        let rule = gauss_legendre(40);
        let mut s = 0.0;
        for p in 0..30 {
            let a = p as f64 * 0.1;
            for (r, w) in rule.on(a, a + 0.1) {
                s += w * 2.0 * PI * r * ball_convolution_power(n, 2, r).unwrap();
            }
        }
        assert!((s - PI.powi(3)).abs() < 1e-5 * PI.powi(3), "{s}");
    }

    #[test]
    fn plane_kernels_match_convolution_oracle() {
        for q in [4.0, 6.0] {
            for kind in [KernelKind::K, KernelKind::L] {
                let k =
                    build_kernel(kind, q, 2, RadialGrid { r_max: q + 1.0, step: 1.0 / 32.0 }, KernelOptions::default())
                        .unwrap();
                let mut worst: f64 = 0.0;
                for i in 0..=60 {
                    let r = i as f64 * (q - 1.0) / 60.0;
                    let o = convolution_oracle(kind, q, 2, r).unwrap();
                    worst = worst.max((k.exact(r) - o).abs());
                }
                assert!(worst < 1e-3, "q={q} {kind}: {worst}");
            }
        }
    }

    #[test]
    fn monotonicity_report_at_four() {
        let rep = check_K_monotone(4.0, 1).unwrap();
        assert!(rep.passed(), "{rep:?}");
        assert!(rep.max_forward_difference < 0.0);
        assert!(matches!(check_K_monotone(3.0, 1), Err(LabError::OutsideValidatedRange(_))));
    }

    #[test]
    fn csv_round_trip() {
        let k = kernel_L(4.0, 1, RadialGrid { r_max: 5.0, step: 0.25 }).unwrap();
        let text = k.to_csv();
        let back = Kernel::from_csv(&text).unwrap();
        assert_eq!(back.kind, KernelKind::L);
        assert_eq!(back.q, 4.0);
        assert_eq!(back.r.len(), k.r.len());
        for (a, b) in back.values.iter().zip(&k.values) {
            assert!((a - b).abs() <= 1e-11 * (1.0 + b.abs()));
        }
        assert!(Kernel::from_csv("r,value\n0,1\n").is_err());
        let bad = text.replace("kind=L", "kind=Q");
        assert!(matches!(Kernel::from_csv(&bad), Err(LabError::Parse { line: 1, .. })));
        let bad_row = format!("{text}x,1\n");
        assert!(matches!(Kernel::from_csv(&bad_row), Err(LabError::Parse { .. })));
        // A run header in front shifts reported lines but not the parse.
        let with_header = format!("# hylab v0.1.0 config_hash=00\n{text}");
        assert_eq!(Kernel::from_csv(&with_header).unwrap().r.len(), k.r.len());
        let bad = with_header.replace("kind=L", "kind=Q");
        assert!(matches!(Kernel::from_csv(&bad), Err(LabError::Parse { line: 2, .. })));
    }

    #[test]
    fn rejects_invalid_parameters() {
        assert!(kernel_K(3.0, 1, RadialGrid::default_for(3.0)).is_err());
        assert!(kernel_K(4.0, 3, RadialGrid::default_for(4.0)).is_err());
        assert!(kernel_K(4.0, 1, RadialGrid { r_max: 3.0, step: 0.1 }).is_err());
    }
}
