//! Taylor expansions of `||(f e^{ig} 1_E)^||_q^q` about the ball, checked against direct
//! evaluation, with remainder-order fits.
//!
//! The named pairings are evaluated on the frequency lattice that also carries the direct
//! value, using `<u * v, L_q> = int L_q^ u^ v^` and `<u, v * L_q> = int L_q^ u^ conj(v^)` with
//! `L_q^ = |1_B^|^{q-2}` and `K_q^ = |1_B^|^{q-2} 1_B^` built from the same sampled transform.
//! Truncation and aliasing then cancel in `direct - predicted`, which keeps the cubic
//! remainder visible down to rounding. [`spatial_terms`] recomputes the pairings as double
//! sums against the inverted kernels as an independent check.

use crate::error::{LabError, Result};
use crate::fit::{loglog_fit, LineFit};
use crate::functional::{abs_pow, default_tolerance, integrate_adaptive, lattice_spacing, FrequencyPlan};
use crate::kernels::{kernel_K, kernel_L, Kernel, RadialGrid};
use crate::radial_fourier::{envelope_tail, Field, Grid, Point, Samples, SupportSet, TrialFunction};
use crate::report::fmt12;
use crate::special::pairwise_sum;
use num_complex::Complex64;
use rayon::prelude::*;
use std::sync::Arc;

/// Perturbations with `||h||_{q'}` above this are flagged as outside the expansion's range.
pub const SMALLNESS_THRESHOLD: f64 = 0.3;

/// Rounding allowance, in units of machine epsilon times the summed magnitudes.
const ROUNDING_FACTOR: f64 = 64.0;

/// Transforms on the two lattices of a plan, with the ball transform `F` alongside.
struct LatticeData {
    plan: FrequencyPlan,
    points: [Vec<Point>; 2],
    ball: [Vec<Complex64>; 2],
}

impl LatticeData {
    /// Plan whose radius meets `tol` for every sample set, then the ball transform on it.
    fn new(grid: &Grid, q: f64, tol: f64, spacing: f64, samples: &[&Samples]) -> Result<Self> {
        let ball_values: Vec<f64> = grid.in_ball.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let ball = Samples::from_real(grid, &ball_values);
        let mut xi = integrate_adaptive(&ball, q, tol, spacing)?.plan.xi_max;
        for s in samples {
            if !s.is_zero() {
                xi = xi.max(integrate_adaptive(s, q, tol, spacing)?.plan.xi_max);
            }
        }
        let plan = FrequencyPlan { d: grid.dim, spacing, xi_max: xi };
        let [(pa, fa), (pb, fb)] = plan.transforms(&ball);
        Ok(LatticeData { plan, points: [pa, pb], ball: [fa, fb] })
    }

    fn transform(&self, grid: &Grid, values: &[f64]) -> [Vec<Complex64>; 2] {
        let s = Samples::from_real(grid, values);
        let [(_, a), (_, b)] = self.plan.transforms(&s);
        [a, b]
    }

    /// `cell * sum` of a pointwise integrand on each lattice.
    fn sums(&self, f: impl Fn(usize, usize) -> f64) -> [f64; 2] {
        let cell = self.plan.cell_volume();
        let one = |k: usize| -> f64 {
            let v: Vec<f64> = (0..self.points[k].len()).map(|i| f(k, i)).collect();
            cell * pairwise_sum(&v)
        };
        [one(0), one(1)]
    }

    fn lq_hat(&self, k: usize, i: usize, q: f64) -> f64 {
        abs_pow(self.ball[k][i], q - 2.0)
    }

    /// `<K_q, a>` for a real function with transform `a`.
    fn pair_k(&self, q: f64, a: &[Vec<Complex64>; 2]) -> [f64; 2] {
        self.sums(|k, i| self.lq_hat(k, i, q) * (self.ball[k][i].conj() * a[k][i]).re)
    }

    /// `<a * b, L_q>`.
    fn pair_plus(&self, q: f64, a: &[Vec<Complex64>; 2], b: &[Vec<Complex64>; 2]) -> [f64; 2] {
        self.sums(|k, i| self.lq_hat(k, i, q) * (a[k][i] * b[k][i]).re)
    }

    /// `<a, b * L_q>`.
    fn pair_minus(&self, q: f64, a: &[Vec<Complex64>; 2], b: &[Vec<Complex64>; 2]) -> [f64; 2] {
        self.sums(|k, i| self.lq_hat(k, i, q) * (a[k][i].conj() * b[k][i]).re)
    }

    /// `||u^||_q^q` for the transform `a`.
    fn norm(&self, q: f64, a: &[Vec<Complex64>; 2]) -> [f64; 2] {
        self.sums(|k, i| abs_pow(a[k][i], q))
    }

    /// Envelope tail of a pointwise integrand measured on the outer half of the lattice.
    fn tail(&self, q: f64, f: impl Fn(usize, usize) -> f64) -> Result<f64> {
        let d = self.plan.d;
        let xi = self.plan.xi_max;
        let expo = q * (d as f64 + 1.0) / 2.0;
        let mut env: f64 = 0.0;
        for k in 0..2 {
            for (i, p) in self.points[k].iter().enumerate() {
                let r = p[0].hypot(p[1]);
                if r > 0.5 * xi {
                    env = env.max(f(k, i).abs() * (1.0 + r).powf(expo));
                }
            }
        }
        envelope_tail(d, q, xi, (crate::functional::ENVELOPE_SAFETY * env).powf(1.0 / q))
    }

    fn count(&self) -> usize {
        self.points[0].len() + self.points[1].len()
    }
}

fn mean(v: [f64; 2]) -> f64 {
    0.5 * (v[0] + v[1])
}

/// Pointwise quadratic Taylor term of `|F + G|^q` about `F`.
fn pointwise_quadratic(f: Complex64, g: Complex64, q: f64) -> f64 {
    let m2 = f.norm_sqr();
    if m2 == 0.0 {
        return 0.0;
    }
    let c = f.conj() * g;
    abs_pow(f, q - 2.0) * (0.5 * q * (q - 1.0) * c.re * c.re + 0.5 * q * c.im * c.im) / m2
}

/// Pointwise remainder of `|F + G|^q` after the linear and quadratic terms.
fn pointwise_remainder(f: Complex64, g: Complex64, q: f64) -> f64 {
    abs_pow(f + g, q) - abs_pow(f, q) - q * abs_pow(f, q - 2.0) * (f.conj() * g).re - pointwise_quadratic(f, g, q)
}

fn check_q(q: f64) -> Result<()> {
    if !(q > 3.0) || !q.is_finite() {
        return Err(LabError::InvalidParameter(format!("Taylor expansions need q > 3, got {q}")));
    }
    Ok(())
}

fn conjugate(q: f64) -> f64 {
    q / (q - 1.0)
}

/// `||h||_{q'}` of the grid function with real and imaginary parts `u`, `v`.
fn lp_norm(grid: &Grid, u: &[f64], v: &[f64], p: f64) -> f64 {
    let terms: Vec<f64> =
        (0..grid.len()).map(|k| grid.weights[k] * Complex64::new(u[k], v[k]).norm_sqr().powf(0.5 * p)).collect();
    pairwise_sum(&terms).powf(1.0 / p)
}

/// Split `h = f e^{ig} 1_E - 1_B` into real and imaginary parts on the trial's grid.
fn perturbation(t: &TrialFunction) -> (Vec<f64>, Vec<f64>) {
    let grid = t.grid();
    let mut u = vec![0.0; grid.len()];
    let mut v = vec![0.0; grid.len()];
    for k in 0..grid.len() {
        let z = t.value(k);
        u[k] = z.re - if grid.in_ball[k] { 1.0 } else { 0.0 };
        v[k] = z.im;
    }
    (u, v)
}

/// Terms of the general expansion about `1_B` with `h = f e^{ig} 1_E - 1_B`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaylorTerms {
    pub q: f64,
    pub d: usize,
    /// `||1_B^||_q^q`.
    pub base: f64,
    /// `q <K_q, Re h>`.
    pub linear: f64,
    /// `-q(q-2)/4 <Im h * Im h, L_q>`.
    pub im_plus: f64,
    /// `q^2/4 <Im h, Im h * L_q>`.
    pub im_minus: f64,
    /// `q(q-2)/4 <Re h * Re h, L_q>`.
    pub re_plus: f64,
    /// `q^2/4 <Re h * Re h~, L_q>`.
    pub re_minus: f64,
    pub predicted: f64,
    /// `||(f e^{ig} 1_E)^||_q^q` on the same lattice.
    pub direct: f64,
    /// `direct - predicted`.
    pub residual: f64,
    /// Lattice aliasing, remainder tail and rounding allowance for the residual.
    pub residual_budget: f64,
    /// `||h||_{q'}`.
    pub h_norm: f64,
    pub xi_max: f64,
    pub lattice_points: usize,
    pub warnings: Vec<String>,
}

impl TaylorTerms {
    pub fn quadratic(&self) -> f64 {
        self.im_plus + self.im_minus + self.re_plus + self.re_minus
    }

    pub fn csv_header() -> &'static str {
        "q,d,h_norm,base,linear,im_plus,im_minus,re_plus,re_minus,predicted,direct,residual,residual_budget"
    }

    pub fn csv_row(&self) -> String {
        [
            self.q,
            self.d as f64,
            self.h_norm,
            self.base,
            self.linear,
            self.im_plus,
            self.im_minus,
            self.re_plus,
            self.re_minus,
            self.predicted,
            self.direct,
            self.residual,
            self.residual_budget,
        ]
        .iter()
        .map(|v| fmt12(*v))
        .collect::<Vec<_>>()
        .join(",")
    }

    pub fn report(&self) -> String {
        let mut out = format!(
            "Taylor expansion about the ball, q={} d={}\n  ||h||_q'       {}\n  base           {}\n  linear         {}\n  -Im*Im,L       {}\n  Im,Im*L        {}\n  Re*Re,L        {}\n  Re,Re*L        {}\n  predicted      {}\n  direct         {}\n  residual       {} (budget {})\n",
            fmt12(self.q),
            self.d,
            fmt12(self.h_norm),
            fmt12(self.base),
            fmt12(self.linear),
            fmt12(self.im_plus),
            fmt12(self.im_minus),
            fmt12(self.re_plus),
            fmt12(self.re_minus),
            fmt12(self.predicted),
            fmt12(self.direct),
            fmt12(self.residual),
            fmt12(self.residual_budget),
        );
        for w in &self.warnings {
            out.push_str(&format!("  warning: {w}\n"));
        }
        out
    }
}

/// Expansion of `||f^||_q^q` about `1_B` with the default tolerance for the lattice radius.
pub fn expand_gen(t: &TrialFunction, q: f64) -> Result<TaylorTerms> {
    expand_gen_with(t, q, default_tolerance(t.dim()))
}

pub fn expand_gen_with(t: &TrialFunction, q: f64, tol: f64) -> Result<TaylorTerms> {
    check_q(q)?;
    let grid = t.grid();
    let (u, v) = perturbation(t);
    let su = Samples::from_real(grid, &u);
    let trial = t.samples();
    let lat = LatticeData::new(grid, q, tol, lattice_spacing(q, &[t]), &[&trial, &su])?;
    let uh = lat.transform(grid, &u);
    let vh = lat.transform(grid, &v);
    let g = |k: usize, i: usize| uh[k][i] + Complex64::i() * vh[k][i];
    let base = lat.norm(q, &lat.ball);
    let direct = lat.sums(|k, i| abs_pow(lat.ball[k][i] + g(k, i), q));
    let linear = lat.pair_k(q, &uh).map(|x| q * x);
    let a = 0.25 * q * (q - 2.0);
    let b = 0.25 * q * q;
    let im_plus = lat.pair_plus(q, &vh, &vh).map(|x| -a * x);
    let im_minus = lat.pair_minus(q, &vh, &vh).map(|x| b * x);
    let re_plus = lat.pair_plus(q, &uh, &uh).map(|x| a * x);
    let re_minus = lat.pair_minus(q, &uh, &uh).map(|x| b * x);
    let predicted_k = |k: usize| base[k] + linear[k] + im_plus[k] + im_minus[k] + re_plus[k] + re_minus[k];
    let predicted = mean(base) + mean(linear) + mean(im_plus) + mean(im_minus) + mean(re_plus) + mean(re_minus);
    let direct_v = mean(direct);
    let residual = direct_v - predicted;
    let alias = 0.5 * ((direct[0] - predicted_k(0)) - (direct[1] - predicted_k(1))).abs();
    let tail = lat.tail(q, |k, i| pointwise_remainder(lat.ball[k][i], g(k, i), q))?;
    let magnitude = direct_v
        + mean(base)
        + [linear, im_plus, im_minus, re_plus, re_minus].iter().map(|x| mean(*x).abs()).sum::<f64>();
    let rounding = ROUNDING_FACTOR * f64::EPSILON * magnitude;
    let h_norm = lp_norm(grid, &u, &v, conjugate(q));
    let mut warnings = Vec::new();
    if h_norm > SMALLNESS_THRESHOLD {
        warnings.push(format!(
            "||h||_q' = {} exceeds the smallness threshold {}",
            fmt12(h_norm),
            fmt12(SMALLNESS_THRESHOLD)
        ));
    }
    Ok(TaylorTerms {
        q,
        d: t.dim(),
        base: mean(base),
        linear: mean(linear),
        im_plus: mean(im_plus),
        im_minus: mean(im_minus),
        re_plus: mean(re_plus),
        re_minus: mean(re_minus),
        predicted,
        direct: direct_v,
        residual,
        residual_budget: alias + tail + rounding,
        h_norm,
        xi_max: lat.plan.xi_max,
        lattice_points: lat.count(),
        warnings,
    })
}

/// Linear and quadratic pairings recomputed as spatial double sums with inverted kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialTerms {
    pub linear: f64,
    pub im_plus: f64,
    pub im_minus: f64,
    pub re_plus: f64,
    pub re_minus: f64,
}

impl SpatialTerms {
    pub fn quadratic(&self) -> f64 {
        self.im_plus + self.im_minus + self.re_plus + self.re_minus
    }
}

/// `sum_ij w_i w_j a_i b_j L(x_i + x_j)` and `... L(x_i - x_j)`, parallel over rows.
fn double_sums(grid: &Grid, a: &[f64], b: &[f64], l: &Kernel) -> (f64, f64) {
    let rows: Vec<usize> = (0..grid.len()).filter(|&i| a[i] != 0.0).collect();
    let cols: Vec<usize> = (0..grid.len()).filter(|&j| b[j] != 0.0).collect();
    let parts: Vec<(f64, f64)> = rows
        .par_iter()
        .map(|&i| {
            let x = grid.nodes[i];
            let mut plus = Vec::with_capacity(cols.len());
            let mut minus = Vec::with_capacity(cols.len());
            for &j in &cols {
                let y = grid.nodes[j];
                let c = grid.weights[j] * b[j];
                plus.push(c * l.at(&[x[0] + y[0], x[1] + y[1]]));
                minus.push(c * l.at(&[x[0] - y[0], x[1] - y[1]]));
            }
            let s = grid.weights[i] * a[i];
            (s * pairwise_sum(&plus), s * pairwise_sum(&minus))
        })
        .collect();
    let plus: Vec<f64> = parts.iter().map(|p| p.0).collect();
    let minus: Vec<f64> = parts.iter().map(|p| p.1).collect();
    (pairwise_sum(&plus), pairwise_sum(&minus))
}

/// Double-sum evaluation of the linear and quadratic terms of [`expand_gen`].
pub fn spatial_terms(t: &TrialFunction, q: f64) -> Result<SpatialTerms> {
    check_q(q)?;
    let d = t.dim();
    let k = kernel_K(q, d, RadialGrid::default_for(q))?;
    let l = kernel_L(q, d, RadialGrid::default_for(q))?;
    let grid = t.grid();
    let (u, v) = perturbation(t);
    let lin: Vec<f64> = (0..grid.len()).map(|i| grid.weights[i] * u[i] * k.at(&grid.nodes[i])).collect();
    let (vv_plus, vv_minus) = double_sums(grid, &v, &v, &l);
    let (uu_plus, uu_minus) = double_sums(grid, &u, &u, &l);
    let a = 0.25 * q * (q - 2.0);
    let b = 0.25 * q * q;
    Ok(SpatialTerms {
        linear: q * pairwise_sum(&lin),
        im_plus: -a * vv_plus,
        im_minus: b * vv_minus,
        re_plus: a * uu_plus,
        re_minus: b * uu_minus,
    })
}

/// Terms of the support-modulus-phase decomposition about `1_B`.
#[derive(Debug, Clone, PartialEq)]
pub struct FgTerms {
    pub q: f64,
    pub d: usize,
    /// `||1_E^||_q^q`.
    pub indicator: f64,
    /// `q <K_q, (f cos g - 1) 1_{E \ B}>`.
    pub inner: f64,
    /// `||1_B^||_q^q`.
    pub base: f64,
    /// `||(f' e^{ig'} 1_B)^||_q^q` with `f', g'` the restrictions to `B`.
    pub reduced: f64,
    pub approx: f64,
    pub direct: f64,
    /// `direct - approx`.
    pub residual: f64,
    pub residual_budget: f64,
    /// `|E sym-diff B|`.
    pub sym_diff: f64,
    /// `||g||_{L^2(E)}`.
    pub phase_l2: f64,
    /// `||f - 1||_{L^1(E)}`.
    pub modulus_l1: f64,
    pub warnings: Vec<String>,
}

impl FgTerms {
    pub fn csv_header() -> &'static str {
        "q,d,sym_diff,phase_l2,modulus_l1,indicator,inner,base,reduced,approx,direct,residual,residual_budget"
    }

    pub fn csv_row(&self) -> String {
        [
            self.q,
            self.d as f64,
            self.sym_diff,
            self.phase_l2,
            self.modulus_l1,
            self.indicator,
            self.inner,
            self.base,
            self.reduced,
            self.approx,
            self.direct,
            self.residual,
            self.residual_budget,
        ]
        .iter()
        .map(|v| fmt12(*v))
        .collect::<Vec<_>>()
        .join(",")
    }
}

/// Perturbation sizes above which the support-modulus-phase expansion is flagged.
pub const FG_THRESHOLD: f64 = 0.3;

/// Decomposition `||1_E^||^q + q<K_q, (f cos g - 1) 1_{E\B}> - ||1_B^||^q + ||(f' e^{ig'} 1_B)^||^q`
/// of `||(f e^{ig} 1_E)^||_q^q`, with its residual against direct evaluation.
pub fn expand_fg(t: &TrialFunction, q: f64) -> Result<FgTerms> {
    expand_fg_with(t, q, default_tolerance(t.dim()))
}

pub fn expand_fg_with(t: &TrialFunction, q: f64, tol: f64) -> Result<FgTerms> {
    check_q(q)?;
    let grid = t.grid();
    let n = grid.len();
    let (f, g) = (t.f(), t.g());
    let inside = |k: usize| grid.in_support[k];
    let e_values: Vec<f64> = (0..n).map(|k| if inside(k) { 1.0 } else { 0.0 }).collect();
    // (f cos g - 1) on E \ B.
    let outer: Vec<f64> =
        (0..n).map(|k| if inside(k) && !grid.in_ball[k] { f[k] * g[k].cos() - 1.0 } else { 0.0 }).collect();
    // f' e^{ig'} on B: the trial on E n B and 1 on B \ E.
    let reduced_re: Vec<f64> = (0..n)
        .map(|k| match (grid.in_ball[k], inside(k)) {
            (true, true) => f[k] * g[k].cos(),
            (true, false) => 1.0,
            _ => 0.0,
        })
        .collect();
    let reduced_im: Vec<f64> =
        (0..n).map(|k| if grid.in_ball[k] && inside(k) { f[k] * g[k].sin() } else { 0.0 }).collect();
    let trial_re: Vec<f64> = (0..n).map(|k| t.value(k).re).collect();
    let trial_im: Vec<f64> = (0..n).map(|k| t.value(k).im).collect();
    let trial = t.samples();
    let se = Samples::from_real(grid, &e_values);
    let lat = LatticeData::new(grid, q, tol, lattice_spacing(q, &[t]), &[&trial, &se])?;
    let combine = |re: &[f64], im: &[f64]| -> [Vec<Complex64>; 2] {
        let a = lat.transform(grid, re);
        let b = lat.transform(grid, im);
        [0, 1].map(|k| a[k].iter().zip(&b[k]).map(|(x, y)| x + Complex64::i() * y).collect())
    };
    let eh = lat.transform(grid, &e_values);
    let oh = lat.transform(grid, &outer);
    let ph = combine(&reduced_re, &reduced_im);
    let th = combine(&trial_re, &trial_im);
    let indicator = lat.norm(q, &eh);
    let inner = lat.pair_k(q, &oh).map(|x| q * x);
    let base = lat.norm(q, &lat.ball);
    let reduced = lat.norm(q, &ph);
    let direct = lat.norm(q, &th);
    let approx_k = |k: usize| indicator[k] + inner[k] - base[k] + reduced[k];
    let approx = mean(indicator) + mean(inner) - mean(base) + mean(reduced);
    let residual = mean(direct) - approx;
    let alias = 0.5 * ((direct[0] - approx_k(0)) - (direct[1] - approx_k(1))).abs();
    let tail = lat.tail(q, |k, i| {
        abs_pow(th[k][i], q)
            - abs_pow(eh[k][i], q)
            - q * abs_pow(lat.ball[k][i], q - 2.0) * (lat.ball[k][i].conj() * oh[k][i]).re
            + abs_pow(lat.ball[k][i], q)
            - abs_pow(ph[k][i], q)
    })?;
    let magnitude = mean(direct) + mean(indicator) + mean(inner).abs() + mean(base) + mean(reduced);
    let weighted = |pred: &dyn Fn(usize) -> bool, val: &dyn Fn(usize) -> f64| -> f64 {
        let v: Vec<f64> = (0..n).filter(|&k| pred(k)).map(|k| grid.weights[k] * val(k)).collect();
        pairwise_sum(&v)
    };
    let sym_diff = weighted(&|k| inside(k) != grid.in_ball[k], &|_| 1.0);
    let phase_l2 = weighted(&|k| inside(k), &|k| g[k] * g[k]).sqrt();
    let modulus_l1 = weighted(&|k| inside(k), &|k| (1.0 - f[k]).abs());
    let mut warnings = Vec::new();
    for (name, value) in [("|E sym-diff B|", sym_diff), ("||g||_L2(E)", phase_l2), ("||f-1||_L1(E)", modulus_l1)] {
        if value > FG_THRESHOLD {
            warnings.push(format!("{name} = {} exceeds the smallness threshold {}", fmt12(value), fmt12(FG_THRESHOLD)));
        }
    }
    Ok(FgTerms {
        q,
        d: t.dim(),
        indicator: mean(indicator),
        inner: mean(inner),
        base: mean(base),
        reduced: mean(reduced),
        approx,
        direct: mean(direct),
        residual,
        residual_budget: alias + tail + ROUNDING_FACTOR * f64::EPSILON * magnitude,
        sym_diff,
        phase_l2,
        modulus_l1,
        warnings,
    })
}

/// Upper bound for phases with small frequency on the ball, with the direct value.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqBound {
    pub q: f64,
    pub d: usize,
    pub epsilon: f64,
    pub base: f64,
    /// `inf_B K_q`.
    pub kernel_min: f64,
    /// `||cos g - 1||_{L^1(A_g n B_g^eps)}`.
    pub cos_deficit: f64,
    /// `|B_g^eps \ A_g|`.
    pub obtuse_measure: f64,
    /// `|B_g^eps|`.
    pub large_measure: f64,
    /// `(q/2) <K_q, g^2 1_{B \ B_g^eps}>`.
    pub phase_term: f64,
    /// `-q(q-2)/4 <g1 * g1, L_q> + q^2/4 <g1, g1 * L_q>` with `g1 = g 1_{B \ B_g^eps}`.
    pub quadratic: f64,
    pub bound: f64,
    pub direct: f64,
    /// Aliasing, tail and rounding allowance for `direct - bound`.
    pub budget: f64,
    pub warnings: Vec<String>,
}

impl FreqBound {
    pub fn csv_header() -> &'static str {
        "q,d,epsilon,base,kernel_min,cos_deficit,obtuse_measure,large_measure,phase_term,quadratic,bound,direct,budget"
    }

    pub fn csv_row(&self) -> String {
        [
            self.q,
            self.d as f64,
            self.epsilon,
            self.base,
            self.kernel_min,
            self.cos_deficit,
            self.obtuse_measure,
            self.large_measure,
            self.phase_term,
            self.quadratic,
            self.bound,
            self.direct,
            self.budget,
        ]
        .iter()
        .map(|v| fmt12(*v))
        .collect::<Vec<_>>()
        .join(",")
    }
}

/// Hypothesis size for the small-frequency bound.
pub const FREQ_DELTA0: f64 = 0.3;

/// The small-frequency upper bound for `f e^{ig} 1_B` with threshold `epsilon in (0, pi/2)`.
pub fn expand_freq(t: &TrialFunction, epsilon: f64, q: f64) -> Result<FreqBound> {
    expand_freq_with(t, epsilon, q, default_tolerance(t.dim()))
}

pub fn expand_freq_with(t: &TrialFunction, epsilon: f64, q: f64, tol: f64) -> Result<FreqBound> {
    check_q(q)?;
    if !(epsilon > 0.0 && epsilon < 0.5 * std::f64::consts::PI) {
        return Err(LabError::InvalidParameter(format!("epsilon must lie in (0, pi/2), got {epsilon}")));
    }
    let grid = t.grid();
    if (0..grid.len()).any(|k| grid.in_support[k] != grid.in_ball[k]) {
        return Err(LabError::InvalidParameter("the small-frequency bound needs E = B".into()));
    }
    let n = grid.len();
    let (f, g) = (t.f(), t.g());
    let d = t.dim();
    let kernel = kernel_K(q, d, RadialGrid::default_for(q))?;
    let kernel_min =
        kernel.r.iter().zip(&kernel.values).filter(|(r, _)| **r <= 1.0).map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
    let in_ball = |k: usize| grid.in_ball[k];
    let large = |k: usize| in_ball(k) && g[k].abs() > epsilon;
    let acute = |k: usize| g[k].cos() >= 0.0;
    let weighted = |val: &dyn Fn(usize) -> f64| -> f64 {
        let v: Vec<f64> = (0..n).map(|k| grid.weights[k] * val(k)).collect();
        pairwise_sum(&v)
    };
    let cos_deficit = weighted(&|k| if large(k) && acute(k) { (g[k].cos() - 1.0).abs() } else { 0.0 });
    let obtuse_measure = weighted(&|k| if large(k) && !acute(k) { 1.0 } else { 0.0 });
    let large_measure = weighted(&|k| if large(k) { 1.0 } else { 0.0 });
    let g1: Vec<f64> = (0..n).map(|k| if in_ball(k) && !large(k) { g[k] } else { 0.0 }).collect();
    let g1_sq: Vec<f64> = g1.iter().map(|x| x * x).collect();
    let trial_re: Vec<f64> = (0..n).map(|k| t.value(k).re).collect();
    let trial_im: Vec<f64> = (0..n).map(|k| t.value(k).im).collect();
    let trial = t.samples();
    let lat = LatticeData::new(grid, q, tol, lattice_spacing(q, &[t]), &[&trial])?;
    let gh = lat.transform(grid, &g1);
    let g2h = lat.transform(grid, &g1_sq);
    let th = {
        let a = lat.transform(grid, &trial_re);
        let b = lat.transform(grid, &trial_im);
        [0, 1].map(|k| a[k].iter().zip(&b[k]).map(|(x, y)| x + Complex64::i() * y).collect::<Vec<_>>())
    };
    let base = lat.norm(q, &lat.ball);
    let direct = lat.norm(q, &th);
    let phase_term = lat.pair_k(q, &g2h).map(|x| 0.5 * q * x);
    let a = 0.25 * q * (q - 2.0);
    let b = 0.25 * q * q;
    let plus = lat.pair_plus(q, &gh, &gh);
    let minus = lat.pair_minus(q, &gh, &gh);
    let quadratic = [0, 1].map(|k| -a * plus[k] + b * minus[k]);
    let linear_drop = q * kernel_min * (cos_deficit + obtuse_measure);
    let bound_k = |k: usize| base[k] - linear_drop - phase_term[k] + quadratic[k];
    let bound = mean(base) - linear_drop - mean(phase_term) + mean(quadratic);
    let alias = 0.5 * ((direct[0] - bound_k(0)) - (direct[1] - bound_k(1))).abs();
    let tail = lat.tail(q, |k, i| abs_pow(th[k][i], q) - abs_pow(lat.ball[k][i], q))?;
    let magnitude = mean(direct) + mean(base) + mean(phase_term).abs() + mean(quadratic).abs();
    let mut warnings = Vec::new();
    let f_l1 = weighted(&|k| if in_ball(k) { (1.0 - f[k]).abs() } else { 0.0 });
    let g_l2 = weighted(&|k| if in_ball(k) { g[k] * g[k] } else { 0.0 }).sqrt();
    if f_l1 > FREQ_DELTA0 || g_l2 > FREQ_DELTA0 {
        warnings.push(format!(
            "hypotheses violated: ||f-1||_L1 = {}, ||g||_L2 = {}, threshold {}",
            fmt12(f_l1),
            fmt12(g_l2),
            fmt12(FREQ_DELTA0)
        ));
    }
    Ok(FreqBound {
        q,
        d,
        epsilon,
        base: mean(base),
        kernel_min,
        cos_deficit,
        obtuse_measure,
        large_measure,
        phase_term: mean(phase_term),
        quadratic: mean(quadratic),
        bound,
        direct: mean(direct),
        budget: alias + tail + ROUNDING_FACTOR * f64::EPSILON * magnitude,
        warnings,
    })
}

/// A perturbation direction `h_0` about the ball.
#[derive(Clone)]
pub enum Direction {
    /// `f = 1 - t m(x)` on the ball, `m` in `[0, 1]`.
    Modulus(Field),
    /// `g = t p(x)` on the ball.
    Phase(Field),
}

impl std::fmt::Debug for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Direction::Modulus(_) => f.write_str("Modulus"),
            Direction::Phase(_) => f.write_str("Phase"),
        }
    }
}

impl Direction {
    /// `-1_B`: uniform modulus damping.
    pub fn uniform_modulus() -> Self {
        Direction::Modulus(Arc::new(|_: &Point| 1.0))
    }

    /// `g = t x_1`.
    pub fn linear_phase() -> Self {
        Direction::Phase(Arc::new(|x: &Point| x[0]))
    }

    /// Trial `1_B + t h_0` (exponentiated for phases).
    pub fn member(&self, d: usize, t: f64) -> Result<TrialFunction> {
        let ball = SupportSet::unit_ball(d);
        let spec = crate::radial_fourier::GridSpec::default_for(d);
        match self {
            Direction::Modulus(m) => {
                let m = m.clone();
                TrialFunction::new(ball, spec, move |x| 1.0 - t * m(x), |_| 0.0)
            }
            Direction::Phase(p) => {
                let p = p.clone();
                TrialFunction::new(ball, spec, |_| 1.0, move |x| t * p(x))
            }
        }
    }
}

/// Residuals along `t h_0` with the log-log fit over points above their budgets.
#[derive(Debug, Clone, PartialEq)]
pub struct RemainderScaling {
    pub q: f64,
    pub d: usize,
    pub t: Vec<f64>,
    pub rows: Vec<TaylorTerms>,
    pub fit: Option<LineFit>,
    pub below_noise_floor: usize,
}

impl RemainderScaling {
    pub fn slope(&self) -> Option<f64> {
        self.fit.as_ref().map(|f| f.slope)
    }

    pub fn csv(&self) -> String {
        let mut out = format!("t,{}\n", TaylorTerms::csv_header());
        for (t, r) in self.t.iter().zip(&self.rows) {
            out.push_str(&format!("{},{}\n", fmt12(*t), r.csv_row()));
        }
        out
    }

    pub fn report(&self) -> String {
        let mut out = format!(
            "remainder scaling q={} d={}\n  points            {}\n  below noise floor {}\n",
            fmt12(self.q),
            self.d,
            self.rows.len(),
            self.below_noise_floor
        );
        match &self.fit {
            Some(f) => out.push_str(&format!(
                "  fitted slope      {} +- {} (95%)\n  r^2               {}\n",
                fmt12(f.slope),
                fmt12(f.slope_ci95),
                fmt12(f.r_squared)
            )),
            None => out.push_str("  fitted slope      rejected (fewer than three points above the noise floor)\n"),
        }
        out
    }
}

/// Residual of [`expand_gen`] along `t h_0`, fitted in log-log against `t`.
///
/// `t_list` must be geometric with at least five points; `1e-3..1e-1` is the reference window.
pub fn remainder_scaling(direction: &Direction, q: f64, d: usize, t_list: &[f64]) -> Result<RemainderScaling> {
    check_q(q)?;
    crate::stability::check_parameters(t_list)?;
    let rows: Vec<Result<TaylorTerms>> = t_list.par_iter().map(|&t| expand_gen(&direction.member(d, t)?, q)).collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    if rows.iter().all(|r| r.h_norm == 0.0) {
        return Err(LabError::Degenerate("zero perturbation direction".into()));
    }
    let above: Vec<(f64, f64)> = t_list
        .iter()
        .zip(&rows)
        .filter(|(_, r)| r.residual.abs() > r.residual_budget)
        .map(|(t, r)| (*t, r.residual.abs()))
        .collect();
    let below_noise_floor = rows.len() - above.len();
    let fit = if above.len() >= 3 {
        let x: Vec<f64> = above.iter().map(|p| p.0).collect();
        let y: Vec<f64> = above.iter().map(|p| p.1).collect();
        Some(loglog_fit(&x, &y)?)
    } else {
        None
    };
    Ok(RemainderScaling { q, d, t: t_list.to_vec(), rows, fit, below_noise_floor })
}

/// Reference window `1e-3 .. 1e-1` with five geometric points.
pub fn reference_window() -> Vec<f64> {
    (0..5).map(|k| 1e-3 * 10f64.powf(0.5 * k as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::piecewise::convolution_power;
    use crate::radial_fourier::GridSpec;
    use crate::special::gauss_legendre;

    /// `int_a^b K_4` in d=1 from the closed-form triple convolution (one polynomial piece per call).
    fn k4_integral(a: f64, b: f64) -> f64 {
        let k4 = convolution_power(&[(-1.0, 1.0)], 3);
        gauss_legendre(8).on(a, b).map(|(x, w)| w * k4.eval(x)).sum()
    }

    fn ball_trial(
        f: impl Fn(&Point) -> f64 + Send + Sync + 'static,
        g: impl Fn(&Point) -> f64 + Send + Sync + 'static,
    ) -> TrialFunction {
        TrialFunction::new(SupportSet::unit_ball(1), GridSpec::default_for(1), f, g).unwrap()
    }

    #[test]
    fn zero_perturbation_has_zero_terms() {
        let t = TrialFunction::ball(1).unwrap();
        let terms = expand_gen(&t, 4.0).unwrap();
        for v in [terms.linear, terms.im_plus, terms.im_minus, terms.re_plus, terms.re_minus] {
            assert_eq!(v, 0.0);
        }
        assert_eq!(terms.predicted, terms.base);
        assert!((terms.base - 16.0 / 3.0).abs() < 1e-6);
        assert!(terms.residual.abs() <= terms.residual_budget);
    }

    #[test]
    fn constant_modulus_linear_term() {
        let t = ball_trial(|_| 0.99, |_| 0.0);
        let terms = expand_gen(&t, 4.0).unwrap();
        let expected = -0.01 * 4.0 * k4_integral(-1.0, 1.0);
        assert!((terms.linear - expected).abs() < 1e-6 * expected.abs(), "{} vs {expected}", terms.linear);
        // Real perturbation: imaginary terms vanish identically.
        assert_eq!(terms.im_plus, 0.0);
        assert_eq!(terms.im_minus, 0.0);
        // Cubic remainder, about 21 t^3 along this direction.
        assert!(terms.residual.abs() < 5e-5);
    }

    #[test]
    fn residual_is_direct_minus_predicted() {
        let t = ball_trial(|x| 1.0 - 0.02 * x[0] * x[0], |x| 0.05 * x[0] * x[0]);
        let terms = expand_gen(&t, 4.0).unwrap();
        assert_eq!(terms.residual, terms.direct - terms.predicted);
        assert!((terms.predicted - (terms.base + terms.linear + terms.quadratic())).abs() < 1e-14 * terms.base);
        assert!(terms.warnings.is_empty());
        let row = terms.csv_row();
        assert_eq!(row.split(',').count(), TaylorTerms::csv_header().split(',').count());
    }

    #[test]
    fn spatial_double_sums_agree_with_frequency_pairings() {
        let spec = GridSpec::midpoint(1.0 / 256.0);
        let t = TrialFunction::new(
            SupportSet::unit_ball(1),
            spec,
            |x| 1.0 - 0.05 * (1.0 + x[0]) / 2.0,
            |x| 0.1 * x[0] * x[0],
        )
        .unwrap();
        let freq = expand_gen(&t, 4.0).unwrap();
        let spatial = spatial_terms(&t, 4.0).unwrap();
        for (a, b) in [
            (freq.linear, spatial.linear),
            (freq.im_plus, spatial.im_plus),
            (freq.im_minus, spatial.im_minus),
            (freq.re_plus, spatial.re_plus),
            (freq.re_minus, spatial.re_minus),
        ] {
            assert!((a - b).abs() < 1e-4 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn even_q_direct_value_stays_below_ball() {
        let t = ball_trial(|x| 1.0 - 0.3 * x[0].abs(), |x| 0.7 * x[0] * x[0] - 0.2 * x[0]);
        let terms = expand_gen(&t, 4.0).unwrap();
        assert!(terms.direct <= terms.base + terms.residual_budget);
    }

    #[test]
    fn fg_on_the_ball_has_no_inner_term() {
        let t = ball_trial(|_| 0.98, |x| 0.03 * x[0]);
        let fg = expand_fg(&t, 4.0).unwrap();
        assert_eq!(fg.inner, 0.0);
        assert!(fg.sym_diff.abs() < 1e-12);
        assert!(fg.residual.abs() <= fg.residual_budget + 1e-10);
    }

    #[test]
    fn fg_inner_term_on_outer_sliver() {
        let e = SupportSet::interval(-1.0, 1.05).unwrap();
        let t =
            TrialFunction::new(e, GridSpec::default_for(1), |x| if x[0] > 1.0 { 0.99 } else { 1.0 }, |_| 0.0).unwrap();
        let fg = expand_fg(&t, 4.0).unwrap();
        let expected = -4.0 * 0.01 * k4_integral(1.0, 1.05);
        assert!((fg.inner - expected).abs() < 1e-3 * expected.abs(), "{} vs {expected}", fg.inner);
        assert!((fg.sym_diff - 0.05).abs() < 1e-9);
    }

    #[test]
    fn fg_pure_support_residual_vanishes() {
        // f = 1, g = 0: the reduced function is 1_B, so the decomposition is exact.
        let t = TrialFunction::indicator(SupportSet::interval(-1.0, 1.05).unwrap()).unwrap();
        let fg = expand_fg(&t, 4.0).unwrap();
        assert_eq!(fg.inner, 0.0);
        assert!(fg.residual.abs() <= fg.residual_budget);
    }

    #[test]
    fn freq_bound_examples() {
        let zero = ball_trial(|_| 1.0, |_| 0.0);
        let b = expand_freq(&zero, 0.1, 4.0).unwrap();
        assert_eq!(b.bound, b.base);
        assert!((b.direct - b.base).abs() <= b.budget);

        let small = ball_trial(|_| 1.0, |x| 0.05 * x[0]);
        let b = expand_freq(&small, 0.1, 4.0).unwrap();
        assert_eq!(b.large_measure, 0.0);
        assert!(b.direct <= b.bound + b.budget, "{b:?}");

        let bump = ball_trial(|_| 1.0, |x| if x[0] > 0.5 && x[0] < 0.6 { 1.0 } else { 0.0 });
        let b = expand_freq(&bump, 0.1, 4.0).unwrap();
        // Set membership is resolved at the cell level (1/1024).
        let cell = 1.0 / 1024.0;
        assert!((b.large_measure - 0.1).abs() <= 2.0 * cell);
        assert!((b.cos_deficit - 0.1 * (1.0 - 1f64.cos())).abs() <= 2.0 * cell * (1.0 - 1f64.cos()));
        assert_eq!(b.obtuse_measure, 0.0);
    }

    #[test]
    fn freq_bound_requires_ball_support() {
        let t = TrialFunction::indicator(SupportSet::interval(-1.0, 1.05).unwrap()).unwrap();
        assert!(expand_freq(&t, 0.1, 4.0).is_err());
        let t = TrialFunction::ball(1).unwrap();
        assert!(expand_freq(&t, 2.0, 4.0).is_err());
    }

    #[test]
    fn zero_direction_is_rejected() {
        let zero = Direction::Modulus(Arc::new(|_: &Point| 0.0));
        assert!(matches!(remainder_scaling(&zero, 4.0, 1, &reference_window()), Err(LabError::Degenerate(_))));
        assert!(remainder_scaling(&Direction::linear_phase(), 4.0, 1, &[0.1, 0.05]).is_err());
    }

    #[test]
    fn modulus_remainder_is_cubic() {
        let s = remainder_scaling(&Direction::uniform_modulus(), 4.0, 1, &reference_window()).unwrap();
        let slope = s.slope().unwrap();
        assert!(slope >= 2.7, "{}", s.report());
    }
}
