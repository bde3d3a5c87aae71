//! The functional `||(f e^{ig} 1_E)^||_q^q` with an error budget, its even-`q`
//! convolution oracle, deficits against the ball and q-continuity scans.
//!
//! The transform is sampled on a uniform frequency lattice and on the same lattice
//! shifted by half a cell. For even `q` the lattice sum is exact up to the tail (the
//! integrand is the transform of a function supported in a box of width `q W / 2`), so
//! the two sums differ only by rounding; for other `q` their difference estimates the
//! aliasing error. The lattice is grown in doubling shells until the envelope tail
//! beyond the last shell, with the constant measured on that shell, drops below a
//! quarter of the tolerance.

use crate::error::{LabError, Result};
use crate::kernels::ball_convolution_power;
use crate::piecewise::convolution_power;
use crate::radial_fourier::{
    envelope_tail, FreqLattice, Grid, GridSpec, Point, Rule, Samples, SupportSet, TrialFunction,
};
use crate::report::fmt12;
use crate::special::{gauss_legendre, pairwise_sum};
use num_complex::Complex64;
use rayon::prelude::*;
use std::f64::consts::PI;

/// Default absolute tolerance on `||.||_q^q` in dimension one.
pub const D1_TOLERANCE: f64 = 1e-6;
/// Default absolute tolerance on `||.||_q^q` in dimension two.
pub const D2_TOLERANCE: f64 = 1e-4;
/// Safety factor applied to the envelope constant measured on the outermost shell.
pub const ENVELOPE_SAFETY: f64 = 1.25;

/// Default tolerance for dimension `d`.
pub fn default_tolerance(d: usize) -> f64 {
    if d == 1 {
        D1_TOLERANCE
    } else {
        D2_TOLERANCE
    }
}

/// Options for [`norm_q_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormOptions {
    /// Absolute tolerance for the frequency tail; default by dimension.
    pub tol: Option<f64>,
    /// Estimate the spatial quadrature error from a companion grid.
    pub grid_check: bool,
}

impl Default for NormOptions {
    fn default() -> Self {
        NormOptions { tol: None, grid_check: true }
    }
}

/// Frequency lattice and truncation radius used for one integration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrequencyPlan {
    pub d: usize,
    pub spacing: f64,
    pub xi_max: f64,
}

impl FrequencyPlan {
    /// Alias-free plan for exponent `q` and spatial width `width`.
    pub fn new(d: usize, q: f64, width: f64, xi_max: f64) -> Self {
        FrequencyPlan { d, spacing: FreqLattice::alias_free_spacing(q, width), xi_max }
    }

    pub fn lattices(&self) -> [FreqLattice; 2] {
        [FreqLattice::new(self.d, self.spacing, 0.0), FreqLattice::new(self.d, self.spacing, 0.5)]
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.powi(self.d as i32)
    }

    /// Transform values on both lattices for `|xi| <= xi_max`, in lattice order.
    pub fn transforms(&self, s: &Samples) -> [(Vec<Point>, Vec<Complex64>); 2] {
        let [a, b] = self.lattices();
        [s.transform_shell(&a, -1.0, self.xi_max), s.transform_shell(&b, -1.0, self.xi_max)]
    }

    /// `cell * sum` on each lattice of `values`, combined as (mean, half difference).
    pub fn integrate(&self, values: &[Vec<f64>; 2]) -> (f64, f64) {
        let a = self.cell_volume() * pairwise_sum(&values[0]);
        let b = self.cell_volume() * pairwise_sum(&values[1]);
        (0.5 * (a + b), 0.5 * (a - b).abs())
    }
}

/// `|z|^q` computed as `(|z|^2)^{q/2}`.
#[inline]
pub fn abs_pow(z: Complex64, q: f64) -> f64 {
    z.norm_sqr().powf(0.5 * q)
}

/// `||u^||_q^q` with its error terms.
#[derive(Debug, Clone, PartialEq)]
pub struct NormResult {
    pub q: f64,
    pub d: usize,
    pub value: f64,
    /// Spatial quadrature error estimate plus the lattice aliasing estimate.
    pub quadrature_error: f64,
    pub alias_error: f64,
    pub grid_error: f64,
    /// Bound on the integral over `|xi| > xi_max`.
    pub tail_bound: f64,
    pub xi_max: f64,
    pub lattice_spacing: f64,
    pub lattice_points: usize,
    pub nodes: usize,
    pub nyquist: f64,
    pub cell: f64,
}

impl NormResult {
    fn zero(q: f64, d: usize, nodes: usize, nyquist: f64, cell: f64) -> Self {
        NormResult {
            q,
            d,
            value: 0.0,
            quadrature_error: 0.0,
            alias_error: 0.0,
            grid_error: 0.0,
            tail_bound: 0.0,
            xi_max: 0.0,
            lattice_spacing: 0.0,
            lattice_points: 0,
            nodes,
            nyquist,
            cell,
        }
    }

    /// Total error budget.
    pub fn budget(&self) -> f64 {
        self.quadrature_error + self.tail_bound
    }

    /// `||u^||_q`.
    pub fn norm(&self) -> f64 {
        self.value.powf(1.0 / self.q)
    }

    pub fn csv_header() -> &'static str {
        "q,d,value,budget,quadrature_error,alias_error,grid_error,tail_bound,xi_max,lattice_spacing,lattice_points,nodes"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            fmt12(self.q),
            self.d,
            fmt12(self.value),
            fmt12(self.budget()),
            fmt12(self.quadrature_error),
            fmt12(self.alias_error),
            fmt12(self.grid_error),
            fmt12(self.tail_bound),
            fmt12(self.xi_max),
            fmt12(self.lattice_spacing),
            self.lattice_points,
            self.nodes
        )
    }

    /// Human-readable block.
    pub fn report(&self) -> String {
        format!(
            "norm_q^q  q={} d={}\n  value          {}\n  budget         {}\n    aliasing     {}\n    spatial grid {}\n    tail         {}\n  xi_max         {}\n  lattice        {} points, spacing {}\n  spatial nodes  {}\n",
            fmt12(self.q),
            self.d,
            fmt12(self.value),
            fmt12(self.budget()),
            fmt12(self.alias_error),
            fmt12(self.grid_error),
            fmt12(self.tail_bound),
            fmt12(self.xi_max),
            self.lattice_points,
            fmt12(self.lattice_spacing),
            self.nodes
        )
    }
}

/// Lattice integral of `|s^|^q` over `|xi| <= xi_max` plus the envelope tail beyond.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeIntegral {
    pub value: f64,
    pub alias_error: f64,
    pub tail_bound: f64,
    pub plan: FrequencyPlan,
    pub points: usize,
}

fn first_radius(d: usize) -> f64 {
    if d == 1 {
        16.0
    } else {
        4.0
    }
}

struct ShellAccumulator {
    d: usize,
    q: f64,
    sums: [Vec<f64>; 2],
    points: usize,
}

impl ShellAccumulator {
    /// Add the shell `lo < |xi| <= hi`; returns the envelope constant measured on `(hi/2, hi]`.
    fn add(&mut self, s: &Samples, plan: &FrequencyPlan, lo: f64, hi: f64) -> f64 {
        let expo = 0.5 * (self.d as f64 + 1.0);
        let mut envelope: f64 = 0.0;
        for (k, lattice) in plan.lattices().iter().enumerate() {
            let (pts, vals) = s.transform_shell(lattice, lo, hi);
            let powers: Vec<f64> = vals.iter().map(|z| abs_pow(*z, self.q)).collect();
            self.sums[k].push(pairwise_sum(&powers));
            self.points += pts.len();
            for (p, z) in pts.iter().zip(&vals) {
                let r = p[0].hypot(p[1]);
                if r > 0.5 * hi {
                    envelope = envelope.max(z.norm() * (1.0 + r).powf(expo));
                }
            }
        }
        ENVELOPE_SAFETY * envelope
    }

    fn finish(&self, plan: FrequencyPlan, tail_bound: f64) -> LatticeIntegral {
        // Shells are summed from the outside in so small contributions are not absorbed.
        let total = |v: &Vec<f64>| v.iter().rev().fold(0.0, |acc, x| acc + x);
        let a = plan.cell_volume() * total(&self.sums[0]);
        let b = plan.cell_volume() * total(&self.sums[1]);
        LatticeIntegral {
            value: 0.5 * (a + b),
            alias_error: 0.5 * (a - b).abs(),
            tail_bound,
            plan,
            points: self.points,
        }
    }
}

/// Grow the truncation radius by doubling (capped at the resolvable frequency) until the
/// tail estimate is below `tol / 4`.
pub fn integrate_adaptive(s: &Samples, q: f64, tol: f64, spacing: f64) -> Result<LatticeIntegral> {
    let d = s.dim;
    let target = 0.25 * tol;
    let mut plan = FrequencyPlan { d, spacing, xi_max: first_radius(d).min(s.nyquist) };
    let mut acc = ShellAccumulator { d, q, sums: [Vec::new(), Vec::new()], points: 0 };
    let mut lo = -1.0;
    loop {
        let c = acc.add(s, &plan, lo, plan.xi_max);
        let tail = envelope_tail(d, q, plan.xi_max, c)?;
        if tail <= target {
            return Ok(acc.finish(plan, tail));
        }
        // The last shell may stop short of doubling, at the resolvable frequency.
        let next = (2.0 * plan.xi_max).min(s.nyquist);
        if next <= plan.xi_max {
            // Radius at which the envelope tail would meet the target.
            let a = q * (d as f64 + 1.0) / 2.0;
            let required = (1.0 + plan.xi_max) * (target / tail).powf(1.0 / (d as f64 - a)) - 1.0;
            return Err(LabError::ToleranceUnachievable { tol, required, nyquist: s.nyquist });
        }
        lo = plan.xi_max;
        plan.xi_max = next;
    }
}

/// Integrate on a fixed plan; the tail uses the envelope measured on the outermost shell.
pub fn integrate_fixed(s: &Samples, q: f64, plan: FrequencyPlan) -> Result<LatticeIntegral> {
    let d = s.dim;
    if plan.xi_max > s.nyquist {
        return Err(LabError::GridTooCoarse { xi: plan.xi_max, nyquist: s.nyquist });
    }
    let mut acc = ShellAccumulator { d, q, sums: [Vec::new(), Vec::new()], points: 0 };
    let inner = 0.5 * plan.xi_max;
    acc.add(s, &plan, -1.0, inner);
    let c = acc.add(s, &plan, inner, plan.xi_max);
    Ok(acc.finish(plan, envelope_tail(d, q, plan.xi_max, c)?))
}

/// Margin applied to Richardson error estimates.
pub const RICHARDSON_SAFETY: f64 = 1.25;

/// Error of `fine` estimated from a grid with doubled cells, for a rule of the given order.
pub fn richardson_error(fine: f64, coarse: f64, order: i32) -> f64 {
    RICHARDSON_SAFETY * (fine - coarse).abs() / (2f64.powi(order) - 1.0)
}

fn check_q(q: f64) -> Result<()> {
    if !(q > 2.0) || !q.is_finite() {
        return Err(LabError::InvalidParameter(format!("norm_q needs q > 2, got {q}")));
    }
    Ok(())
}

/// `||(f e^{ig} 1_E)^||_q^q` with default options.
pub fn norm_q(t: &TrialFunction, q: f64) -> Result<NormResult> {
    norm_q_with(t, q, NormOptions::default())
}

/// `||(f e^{ig} 1_E)^||_q^q`.
pub fn norm_q_with(t: &TrialFunction, q: f64, opts: NormOptions) -> Result<NormResult> {
    check_q(q)?;
    let d = t.dim();
    let tol = opts.tol.unwrap_or(default_tolerance(d));
    if !(tol > 0.0) {
        return Err(LabError::InvalidParameter("tolerance must be positive".into()));
    }
    let s = t.samples();
    let cell = t.spec().cell;
    if s.is_zero() {
        return Ok(NormResult::zero(q, d, t.grid().len(), s.nyquist, cell));
    }
    let fine = integrate_adaptive(&s, q, tol, lattice_spacing(q, &[t]))?;
    let grid_error = if opts.grid_check {
        let kind = Companion::choose(&[t], fine.plan.xi_max)?;
        let other = integrate_fixed(&kind.samples(t)?, q, fine.plan)?;
        kind.error(t.spec(), fine.value, other.value)
    } else {
        0.0
    };
    Ok(NormResult {
        q,
        d,
        value: fine.value,
        quadrature_error: fine.alias_error + grid_error,
        alias_error: fine.alias_error,
        grid_error,
        tail_bound: fine.tail_bound,
        xi_max: fine.plan.xi_max,
        lattice_spacing: fine.plan.spacing,
        lattice_points: fine.points,
        nodes: t.grid().len(),
        nyquist: s.nyquist,
        cell,
    })
}

/// Second grid used to estimate the spatial quadrature error of a trial's grid.
///
/// Doubled cells give a Richardson estimate when that grid still resolves the truncation
/// radius; otherwise a finer companion is used (halved cells for the midpoint rule, two
/// more Gauss points per cell and half again as many rays for Gauss rules).
#[derive(Debug, Clone, Copy, PartialEq)]
enum Companion {
    Coarse,
    Fine,
}

impl Companion {
    fn spec(&self, spec: &GridSpec) -> GridSpec {
        match (self, spec.rule) {
            (Companion::Coarse, _) => spec.scaled(2.0),
            (Companion::Fine, Rule::Midpoint) => spec.scaled(0.5),
            (Companion::Fine, Rule::Gauss(p)) => {
                GridSpec { rule: Rule::Gauss(p + 2), cell: spec.cell, angular: spec.angular * 3 / 2 }
            }
        }
    }

    /// Same kind for every trial so that paired differences stay consistent.
    fn choose(trials: &[&TrialFunction], xi: f64) -> Result<Self> {
        for t in trials {
            let coarse = Grid::covering(t.support(), &Companion::Coarse.spec(t.spec()))?;
            if coarse.nyquist() < xi {
                return Ok(Companion::Fine);
            }
        }
        Ok(Companion::Coarse)
    }

    fn samples(&self, t: &TrialFunction) -> Result<Samples> {
        Ok(t.resample(self.spec(t.spec()))?.samples())
    }

    /// Error estimate for `value` from the companion value.
    fn error(&self, spec: &GridSpec, value: f64, other: f64) -> f64 {
        let p = 2f64.powi(spec.rule.order() as i32);
        let factor = match (self, spec.rule) {
            (Companion::Coarse, _) => 1.0 / (p - 1.0),
            (Companion::Fine, Rule::Midpoint) => p / (p - 1.0),
            (Companion::Fine, Rule::Gauss(_)) => 1.0,
        };
        RICHARDSON_SAFETY * factor * (value - other).abs()
    }
}

/// Alias-free lattice spacing for trials and their companion grids.
pub(crate) fn lattice_spacing(q: f64, trials: &[&TrialFunction]) -> f64 {
    // Companion grids pad their extent by at most two more coarse spacings.
    let width = trials.iter().map(|t| t.grid().extent() + 4.0 * t.grid().spacing).fold(0.0, f64::max);
    FreqLattice::alias_free_spacing(q, width)
}

/// `||1_E * ... * 1_E||_2^2` with `m` factors by iterated spatial convolution.
///
/// Interval unions use exact piecewise polynomials; planar balls use radial tables of
/// `1_B^{*m}`; other planar sets are rasterized at `cell` and convolved discretely.
pub fn convolution_norm_oracle(e: &SupportSet, m: usize) -> Result<f64> {
    convolution_norm_oracle_with(e, m, 1.0 / 32.0)
}

pub fn convolution_norm_oracle_with(e: &SupportSet, m: usize, cell: f64) -> Result<f64> {
    if m < 2 {
        return Err(LabError::InvalidParameter("convolution oracle needs m >= 2".into()));
    }
    if let Some(iv) = e.as_intervals() {
        return Ok(convolution_power(&iv, m).l2_norm_sq());
    }
    if let SupportSet::Ball { dim: 2, radius } = e {
        // 1_{rB}^{*m}(x) = r^{2(m-1)} 1_B^{*m}(x/r).
        let rule = gauss_legendre(32);
        let mut acc = 0.0;
        for k in 0..(4 * m) {
            let a = k as f64 * 0.25;
            let b = a + 0.25;
            for (r, w) in rule.on(a, b) {
                let v = ball_convolution_power(m, 2, r)?;
                acc += w * 2.0 * PI * r * v * v;
            }
        }
        return Ok(radius.powi(4 * (m as i32 - 1) + 2) * acc);
    }
    raster_convolution_norm(e, m, cell)
}

fn raster_convolution_norm(e: &SupportSet, m: usize, h: f64) -> Result<f64> {
    let pts: Vec<(i64, i64)> = {
        let mut v = Vec::new();
        let r = 64.0_f64;
        let n = (r / h) as i64;
        // Bounding box search around the set: scan outward until a full empty ring.
        let mut extent = 1i64;
        loop {
            let mut found_on_ring = false;
            for j in -extent..=extent {
                for i in -extent..=extent {
                    if i.abs() != extent && j.abs() != extent {
                        continue;
                    }
                    if e.contains(&[(i as f64 + 0.5) * h, (j as f64 + 0.5) * h]) {
                        found_on_ring = true;
                    }
                }
            }
            if (!found_on_ring && extent as f64 * h > 1.0) || extent >= n {
                break;
            }
            extent += 1;
        }
        for j in -extent..=extent {
            for i in -extent..=extent {
                if e.contains(&[(i as f64 + 0.5) * h, (j as f64 + 0.5) * h]) {
                    v.push((i, j));
                }
            }
        }
        v
    };
    if pts.is_empty() {
        return Ok(0.0);
    }
    let cell = h * h;
    // phi as a sparse map on the integer lattice; offsets accumulate by index addition.
    let mut phi: std::collections::BTreeMap<(i64, i64), f64> = pts.iter().map(|&p| (p, cell)).collect();
    for _ in 1..m {
        let mut next: std::collections::BTreeMap<(i64, i64), f64> = std::collections::BTreeMap::new();
        for (&(i, j), &v) in &phi {
            for &(a, b) in &pts {
                *next.entry((i + a, j + b)).or_insert(0.0) += v * cell;
            }
        }
        phi = next;
    }
    // phi holds cell-integrated masses; the density is phi / cell.
    let vals: Vec<f64> = phi.values().map(|v| v * v / cell).collect();
    Ok(pairwise_sum(&vals))
}

/// Deficit of a trial against the ball after volume matching.
#[derive(Debug, Clone, PartialEq)]
pub struct DeficitReport {
    pub q: f64,
    pub d: usize,
    /// `||1_B^||_q^q - ||f^||_q^q` after dilating so that `|E| = |B|`.
    pub deficit: f64,
    pub budget: f64,
    pub base: f64,
    pub value: f64,
    /// Dilation factor applied to reach `|E| = |B|`.
    pub dilation: f64,
    /// `||f - 1||_{L^1(E)}`.
    pub modulus_l1: f64,
    /// `dist_E(e^{ig}, affine modulations)^2`.
    pub phase_distance_sq: f64,
    /// `dist(E, ellipsoids)^2`.
    pub support_distance_sq: f64,
    /// `deficit / (sum of distance terms)`, when the sum is positive.
    pub implied_constant: Option<f64>,
    /// Distances are upper bounds from optimizers; set when one did not converge.
    pub optimizer_flags: Vec<String>,
}

impl DeficitReport {
    pub fn distance_sum(&self) -> f64 {
        self.modulus_l1 + self.phase_distance_sq + self.support_distance_sq
    }

    /// `Some(sign)` when the interval `deficit +- budget` excludes zero.
    pub fn certified_sign(&self) -> Option<f64> {
        if self.deficit.abs() > self.budget {
            Some(self.deficit.signum())
        } else {
            None
        }
    }

    pub fn csv_header() -> &'static str {
        "q,d,deficit,budget,modulus_l1,phase_distance_sq,support_distance_sq,implied_constant,dilation,flags"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            fmt12(self.q),
            self.d,
            fmt12(self.deficit),
            fmt12(self.budget),
            fmt12(self.modulus_l1),
            fmt12(self.phase_distance_sq),
            fmt12(self.support_distance_sq),
            self.implied_constant.map_or("".to_string(), fmt12),
            fmt12(self.dilation),
            self.optimizer_flags.join(";")
        )
    }

    pub fn report(&self) -> String {
        let c = self.implied_constant.map_or("undefined (all distances zero)".to_string(), fmt12);
        let sign = match self.certified_sign() {
            Some(s) if s > 0.0 => "positive",
            Some(_) => "negative",
            None => "not certified",
        };
        let mut out = format!(
            "deficit  q={} d={}\n  deficit            {} +- {} ({sign})\n  ball value         {}\n  trial value        {}\n  dilation           {}\n  ||f-1||_L1(E)      {}\n  phase distance^2   {}\n  support distance^2 {}\n  implied constant   {c}\n",
            fmt12(self.q),
            self.d,
            fmt12(self.deficit),
            fmt12(self.budget),
            fmt12(self.base),
            fmt12(self.value),
            fmt12(self.dilation),
            fmt12(self.modulus_l1),
            fmt12(self.phase_distance_sq),
            fmt12(self.support_distance_sq),
        );
        for f in &self.optimizer_flags {
            out.push_str(&format!("  flag: {f}\n"));
        }
        out
    }
}

/// `||1_B^||_q^q` and the trial value on a shared lattice, so that common errors cancel.
pub struct PairedNorms {
    pub base: NormResult,
    pub trial: NormResult,
    /// Grid error estimate for `base - trial` from the companion grids.
    pub difference_grid_error: f64,
}

/// Evaluate the ball and a trial on one plan (spacing from the wider of the two grids).
pub fn paired_norms(t: &TrialFunction, ball: &TrialFunction, q: f64, tol: f64) -> Result<PairedNorms> {
    check_q(q)?;
    let st = t.samples();
    let sb = ball.samples();
    let spacing = lattice_spacing(q, &[t, ball]);
    let fine_b = integrate_adaptive(&sb, q, tol, spacing)?;
    let fine_t = if st.is_zero() { None } else { Some(integrate_adaptive(&st, q, tol, spacing)?) };
    let xi = fine_t.map_or(fine_b.plan.xi_max, |r| r.plan.xi_max.max(fine_b.plan.xi_max));
    let plan = FrequencyPlan { d: t.dim(), spacing, xi_max: xi };
    let kind = Companion::choose(&[t, ball], xi)?;
    let build = |fine: &Samples, tr: &TrialFunction| -> Result<(NormResult, f64)> {
        if fine.is_zero() {
            let z = NormResult::zero(q, tr.dim(), tr.grid().len(), fine.nyquist, tr.spec().cell);
            return Ok((z, 0.0));
        }
        let f = integrate_fixed(fine, q, plan)?;
        let other = integrate_fixed(&kind.samples(tr)?, q, plan)?.value;
        let grid_error = kind.error(tr.spec(), f.value, other);
        let r = NormResult {
            q,
            d: tr.dim(),
            value: f.value,
            quadrature_error: f.alias_error + grid_error,
            alias_error: f.alias_error,
            grid_error,
            tail_bound: f.tail_bound,
            xi_max: xi,
            lattice_spacing: spacing,
            lattice_points: f.points,
            nodes: tr.grid().len(),
            nyquist: fine.nyquist,
            cell: tr.spec().cell,
        };
        Ok((r, other))
    };
    let (base, base_other) = build(&sb, ball)?;
    let (trial, trial_other) = build(&st, t)?;
    let difference_grid_error = kind.error(t.spec(), base.value - trial.value, base_other - trial_other);
    Ok(PairedNorms { base, trial, difference_grid_error })
}

/// Dilate a trial so that its support has the measure of the unit ball.
pub fn volume_normalize(t: &TrialFunction) -> Result<(TrialFunction, f64)> {
    let d = t.dim();
    let m = t.support().measure();
    if !(m > 0.0) {
        return Err(LabError::InvalidParameter("support must have positive measure".into()));
    }
    let target = crate::special::ball_volume(d);
    let lambda = (target / m).powf(1.0 / d as f64);
    if (lambda - 1.0).abs() < 1e-14 {
        return Ok((t.clone(), 1.0));
    }
    // Keep the grid resolution of the original trial rather than scaling it with the set.
    let dilated = t.dilate(lambda)?.resample(t.spec().clone())?;
    Ok((dilated, lambda))
}

/// Deficit and distance terms of `t` against the ball of the same dimension.
pub fn deficit(t: &TrialFunction, q: f64) -> Result<DeficitReport> {
    deficit_with(t, q, default_tolerance(t.dim()))
}

pub fn deficit_with(t: &TrialFunction, q: f64, tol: f64) -> Result<DeficitReport> {
    check_q(q)?;
    let d = t.dim();
    let (u, lambda) = volume_normalize(t)?;
    let ball = TrialFunction::indicator_with(SupportSet::unit_ball(d), u.spec().clone())?;
    let norms = paired_norms(&u, &ball, q, tol)?;
    let nodes = u.grid();
    let modulus_l1: f64 = nodes
        .weights
        .iter()
        .zip(&nodes.in_support)
        .zip(u.f())
        .filter(|((_, s), _)| **s)
        .map(|((w, _), f)| w * (1.0 - f).abs())
        .sum();
    let phase = crate::stability::phase_distance(&u)?;
    let support = crate::stability::dist_ellipsoids(u.support())?;
    let mut optimizer_flags = Vec::new();
    if !phase.converged {
        optimizer_flags.push("phase distance optimizer did not converge".to_string());
    }
    if !support.converged {
        optimizer_flags.push("ellipsoid distance optimizer did not converge".to_string());
    }
    let deficit = norms.base.value - norms.trial.value;
    // Grid errors of the two values are correlated; use the estimate for their difference.
    let budget = norms.base.alias_error
        + norms.trial.alias_error
        + norms.base.tail_bound
        + norms.trial.tail_bound
        + norms.difference_grid_error;
    let sum = modulus_l1 + phase.value * phase.value + support.value * support.value;
    Ok(DeficitReport {
        q,
        d,
        deficit,
        budget,
        base: norms.base.value,
        value: norms.trial.value,
        dilation: lambda,
        modulus_l1,
        phase_distance_sq: phase.value * phase.value,
        support_distance_sq: support.value * support.value,
        implied_constant: (sum > 0.0).then(|| deficit / sum),
        optimizer_flags,
    })
}

/// `q -> ||u^||_q` on a sorted list of exponents.
#[derive(Debug, Clone, PartialEq)]
pub struct QScan {
    /// `(q, ||u^||_q, budget on ||u^||_q)`.
    pub points: Vec<(f64, f64, f64)>,
    pub max_jump: f64,
}

impl QScan {
    pub fn csv(&self) -> String {
        let mut out = String::from("q,norm,budget\n");
        for (q, n, b) in &self.points {
            out.push_str(&format!("{},{},{}\n", fmt12(*q), fmt12(*n), fmt12(*b)));
        }
        out
    }
}

/// Evaluate `||u^||_q` along `q_list` and record the largest adjacent jump.
pub fn q_scan(t: &TrialFunction, q_list: &[f64]) -> Result<QScan> {
    if q_list.is_empty() {
        return Err(LabError::InvalidParameter("empty exponent list".into()));
    }
    if q_list.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(LabError::InvalidParameter("exponents must be strictly increasing".into()));
    }
    let results: Vec<Result<NormResult>> = q_list.par_iter().map(|&q| norm_q(t, q)).collect();
    let mut points = Vec::with_capacity(q_list.len());
    for r in results {
        let r = r?;
        let n = r.norm();
        // d(v^{1/q}) = v^{1/q - 1} dv / q
        let b = if r.value > 0.0 { n / (r.q * r.value) * r.budget() } else { 0.0 };
        points.push((r.q, n, b));
    }
    let max_jump = points.windows(2).map(|w| (w[1].1 - w[0].1).abs()).fold(0.0, f64::max);
    Ok(QScan { points, max_jump })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::radial_fourier::GridSpec;
    use std::sync::Arc;

    #[test]
    fn interval_norm_matches_tent_integral() {
        let t = TrialFunction::ball(1).unwrap();
        let r = norm_q(&t, 4.0).unwrap();
        assert!((r.value - 16.0 / 3.0).abs() < 1e-6, "{r:?}");
        assert!(r.budget() < 1e-6, "{r:?}");
        assert!((r.value - 16.0 / 3.0).abs() <= r.budget() + 1e-12, "{r:?}");
    }

    #[test]
    fn modulation_leaves_norm_unchanged() {
        let t = TrialFunction::new(SupportSet::unit_ball(1), GridSpec::default_for(1), |_| 1.0, |x| 5.0 * x[0] + 1.0)
            .unwrap();
        let r = norm_q(&t, 4.0).unwrap();
        assert!((r.value - 16.0 / 3.0).abs() < 1e-6 + r.budget(), "{r:?}");
    }

    #[test]
    fn zero_trial_has_zero_norm() {
        let t = TrialFunction::new(SupportSet::unit_ball(1), GridSpec::default_for(1), |_| 0.0, |_| 0.0).unwrap();
        assert_eq!(norm_q(&t, 4.0).unwrap().value, 0.0);
        assert!(norm_q(&t, 2.0).is_err());
    }

    #[test]
    fn convolution_oracle_examples() {
        let b = SupportSet::unit_ball(1);
        assert!((convolution_norm_oracle(&b, 2).unwrap() - 16.0 / 3.0).abs() < 1e-13);
        let u = SupportSet::interval(0.0, 1.0).unwrap();
        assert!((convolution_norm_oracle(&u, 2).unwrap() - 2.0 / 3.0).abs() < 1e-14);
        assert!(convolution_norm_oracle(&b, 1).is_err());
    }

    #[test]
    fn disk_oracle_matches_norm() {
        let disk = SupportSet::unit_ball(2);
        let oracle = convolution_norm_oracle(&disk, 2).unwrap();
        let r = norm_q(&TrialFunction::ball(2).unwrap(), 4.0).unwrap();
        assert!((r.value - oracle).abs() < 1e-3, "{} vs {oracle}", r.value);
        // Rasterized path against the radial path.
        let star = SupportSet::star(crate::radial_fourier::StarSet::disk(1.0).unwrap());
        let raster = convolution_norm_oracle_with(&star, 2, 1.0 / 24.0).unwrap();
        assert!((raster - oracle).abs() < 0.05 * oracle, "{raster} vs {oracle}");
    }

    #[test]
    fn even_q_matches_convolution_oracle_on_unions() {
        let e = SupportSet::intervals(vec![(-1.3, -0.2), (0.1, 0.45), (0.9, 1.6)]).unwrap();
        let t = TrialFunction::indicator(e.clone()).unwrap();
        for m in [2usize, 3] {
            let r = norm_q(&t, 2.0 * m as f64).unwrap();
            let o = convolution_norm_oracle(&e, m).unwrap();
            assert!((r.value - o).abs() <= r.budget() + 1e-9, "m={m}: {} vs {o} budget {}", r.value, r.budget());
        }
    }

    #[test]
    fn deficit_examples() {
        let ball = TrialFunction::ball(1).unwrap();
        let rep = deficit(&ball, 4.0).unwrap();
        assert!(rep.deficit.abs() <= rep.budget, "{rep:?}");
        assert_eq!(rep.distance_sum(), 0.0);
        assert!(rep.implied_constant.is_none());

        let damped = TrialFunction::new(SupportSet::unit_ball(1), GridSpec::default_for(1), |_| 0.9, |_| 0.0).unwrap();
        let rep = deficit(&damped, 4.0).unwrap();
        assert!((rep.modulus_l1 - 0.2).abs() < 1e-12);
        let expected = 16.0 / 3.0 * (1.0 - 0.9f64.powi(4));
        assert!((rep.deficit - expected).abs() < 1e-6 + rep.budget, "{rep:?}");
        assert_eq!(rep.certified_sign(), Some(1.0));

        let shifted = TrialFunction::indicator(SupportSet::interval(-1.2, 0.8).unwrap()).unwrap();
        let rep = deficit(&shifted, 4.0).unwrap();
        assert!(rep.deficit.abs() <= rep.budget, "{rep:?}");
        assert!(rep.support_distance_sq < 1e-20);
    }

    #[test]
    fn deficit_is_dilation_invariant() {
        let e = SupportSet::intervals(vec![(-1.0, 0.3), (0.5, 1.1)]).unwrap();
        let t = TrialFunction::indicator(e).unwrap();
        let a = deficit(&t, 4.0).unwrap();
        let b = deficit(&t.dilate(1.7).unwrap().resample(GridSpec::default_for(1)).unwrap(), 4.0).unwrap();
        assert!((a.deficit - b.deficit).abs() <= a.budget + b.budget, "{} vs {}", a.deficit, b.deficit);
    }

    #[test]
    fn damping_does_not_increase_even_norm() {
        let e = SupportSet::intervals(vec![(-0.8, 0.2), (0.6, 1.4)]).unwrap();
        let base = norm_q(&TrialFunction::indicator(e.clone()).unwrap(), 4.0).unwrap();
        let f: crate::radial_fourier::Field = Arc::new(|x: &Point| 0.5 + 0.5 * (3.0 * x[0]).cos().abs());
        let t = TrialFunction::from_fields(e, GridSpec::default_for(1), f, Arc::new(|_| 0.0)).unwrap();
        let r = norm_q(&t, 4.0).unwrap();
        assert!(r.value <= base.value + r.budget() + base.budget());
    }

    #[test]
    fn q_scan_single_point_and_refinement() {
        let t = TrialFunction::ball(1).unwrap();
        let s = q_scan(&t, &[4.0]).unwrap();
        assert!((s.points[0].1 - (16.0f64 / 3.0).powf(0.25)).abs() < 1e-7);
        assert_eq!(s.max_jump, 0.0);
        let coarse = q_scan(&t, &[3.8, 4.0, 4.2]).unwrap();
        let fine = q_scan(&t, &[3.8, 3.85, 3.9, 3.95, 4.0, 4.05, 4.1, 4.15, 4.2]).unwrap();
        assert!(fine.max_jump < coarse.max_jump);
        assert!(q_scan(&t, &[4.0, 3.9]).is_err());
    }
}
