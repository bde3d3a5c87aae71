//! Fourier transforms of the unit ball and of trial functions `f e^{ig} 1_E`.
//!
//! Convention: `u^(xi) = int u(x) e^{-2 pi i x.xi} dx`. Points are stored as `[f64; 2]`;
//! in dimension one the second coordinate is zero.
//!
//! Decay envelope: `|1_B^(xi)| + |grad 1_B^(xi)| <= C_d (1+|xi|)^{-(d+1)/2}` with
//! `C_1 = 8.5` and `C_2 = 14`. The suprema of the left side times `(1+rho)^{(d+1)/2}`
//! are 8.416 (d=1, at rho = 0.325) and 13.73 (d=2, at rho = 0.383); the value alone
//! satisfies the envelope with 2.07 and 3.47.

use crate::error::{LabError, Result};
use crate::special::{ball_volume, bessel_j_scaled, gauss_legendre, pairwise_sum_c, sphere_area};
use num_complex::Complex64;
use rayon::prelude::*;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::sync::{Arc, RwLock};

pub type Point = [f64; 2];
pub type Matrix2 = [[f64; 2]; 2];

pub const IDENTITY: Matrix2 = [[1.0, 0.0], [0.0, 1.0]];

/// Documented decay constant for the value-plus-gradient envelope of the ball transform.
pub const C_ENVELOPE_D1: f64 = 8.5;
/// Documented decay constant for the value-plus-gradient envelope of the ball transform.
pub const C_ENVELOPE_D2: f64 = 14.0;

/// Decay constant `C_d` for `d` in {1, 2}.
pub fn decay_constant(d: usize) -> Result<f64> {
    match d {
        1 => Ok(C_ENVELOPE_D1),
        2 => Ok(C_ENVELOPE_D2),
        _ => Err(LabError::UnsupportedDimension(d)),
    }
}

fn check_dim(d: usize) -> Result<()> {
    if d == 1 || d == 2 {
        Ok(())
    } else {
        Err(LabError::UnsupportedDimension(d))
    }
}

/// `1_B^(xi)` at `|xi| = rho`: `rho^{-d/2} J_{d/2}(2 pi rho)`.
pub fn ball_transform(d: usize, rho: f64) -> f64 {
    let rho = rho.abs();
    if d == 1 {
        let x = 2.0 * PI * rho;
        return if x < 1e-4 { 2.0 * (1.0 - x * x / 6.0) } else { x.sin() / (PI * rho) };
    }
    let nu = 0.5 * d as f64;
    (2.0 * PI).powf(nu) * bessel_j_scaled(nu, 2.0 * PI * rho)
}

/// Ball transform with a read-mostly cache keyed by the bit pattern of `rho`.
pub struct BallTransform {
    d: usize,
    cache: RwLock<HashMap<u64, f64>>,
}

impl BallTransform {
    pub fn new(d: usize) -> Self {
        assert!(d >= 1, "dimension must be positive");
        Self { d, cache: RwLock::new(HashMap::new()) }
    }

    pub fn dimension(&self) -> usize {
        self.d
    }

    pub fn value(&self, rho: f64) -> f64 {
        let key = rho.abs().to_bits();
        if let Some(v) = self.cache.read().expect("cache poisoned").get(&key) {
            return *v;
        }
        let v = ball_transform(self.d, rho);
        self.cache.write().expect("cache poisoned").insert(key, v);
        v
    }
}

impl fmt::Debug for BallTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BallTransform").field("d", &self.d).finish()
    }
}

/// `int_{|xi|>Xi} C^q (1+|xi|)^{-q(d+1)/2} d xi`, bounded in closed form by
/// `C^q sigma_{d-1} (1+Xi)^{d-a} / (a-d)` with `a = q(d+1)/2`.
pub fn envelope_tail(d: usize, q: f64, xi: f64, c: f64) -> Result<f64> {
    if d == 0 {
        return Err(LabError::UnsupportedDimension(d));
    }
    let a = q * (d as f64 + 1.0) / 2.0;
    let df = d as f64;
    if !(a > df) {
        return Err(LabError::NonIntegrableTail { exponent: a, dim: d });
    }
    if !(q > 2.0) || !(xi > 0.0) {
        return Err(LabError::InvalidParameter(format!("need q > 2 and Xi > 0, got q={q}, Xi={xi}")));
    }
    if xi.is_infinite() {
        return Ok(0.0);
    }
    Ok(c.powf(q) * sphere_area(d) * (1.0 + xi).powf(df - a) / (a - df))
}

/// Certified tail bound using the documented decay constant `C_d`.
pub fn tail_bound(d: usize, q: f64, xi: f64) -> Result<f64> {
    envelope_tail(d, q, xi, decay_constant(d)?)
}

pub fn mat_det(m: &Matrix2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

pub fn mat_apply(m: &Matrix2, x: &Point) -> Point {
    [m[0][0] * x[0] + m[0][1] * x[1], m[1][0] * x[0] + m[1][1] * x[1]]
}

pub fn mat_mul(a: &Matrix2, b: &Matrix2) -> Matrix2 {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

pub fn mat_inv(m: &Matrix2) -> Option<Matrix2> {
    let det = mat_det(m);
    if det.abs() < 1e-300 || !det.is_finite() {
        return None;
    }
    Some([[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]])
}

/// Largest singular value of a 2x2 matrix.
pub fn mat_norm(m: &Matrix2) -> f64 {
    let a = m[0][0] * m[0][0] + m[1][0] * m[1][0];
    let b = m[0][0] * m[0][1] + m[1][0] * m[1][1];
    let c = m[0][1] * m[0][1] + m[1][1] * m[1][1];
    let tr = a + c;
    let disc = ((a - c).powi(2) + 4.0 * b * b).sqrt();
    (0.5 * (tr + disc)).sqrt()
}

/// Parameters `r` with `|c + r v| <= 1`, as a closed interval when non-empty.
pub fn ray_disk_interval(c: &Point, v: &Point) -> Option<(f64, f64)> {
    let a = v[0] * v[0] + v[1] * v[1];
    let b = c[0] * v[0] + c[1] * v[1];
    let cc = c[0] * c[0] + c[1] * c[1] - 1.0;
    let disc = b * b - a * cc;
    if disc <= 0.0 || a == 0.0 {
        return None;
    }
    let s = disc.sqrt();
    // Stable root pair.
    let q = -(b + b.signum() * s);
    let (r1, r2) = if q == 0.0 {
        (-s / a, s / a)
    } else {
        let x1 = q / a;
        let x2 = cc / q;
        (x1.min(x2), x1.max(x2))
    };
    Some((r1, r2))
}

/// Star-shaped planar set `c + M {r u(theta) : 0 <= r <= rho(theta)}`.
#[derive(Clone)]
pub struct StarSet {
    boundary: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub center: Point,
    pub linear: Matrix2,
    rho_min: f64,
    rho_max: f64,
}

impl fmt::Debug for StarSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StarSet")
            .field("center", &self.center)
            .field("linear", &self.linear)
            .field("rho_min", &self.rho_min)
            .field("rho_max", &self.rho_max)
            .finish()
    }
}

const STAR_SAMPLES: usize = 4096;

impl StarSet {
    /// Star set with boundary radius `rho(theta)`, validated on a dense angle sample.
    pub fn new(boundary: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Result<Self> {
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for k in 0..STAR_SAMPLES {
            let r = boundary(2.0 * PI * k as f64 / STAR_SAMPLES as f64);
            if !r.is_finite() || r <= 0.0 {
                return Err(LabError::InvalidParameter(format!(
                    "boundary radius must be positive and finite, got {r}"
                )));
            }
            lo = lo.min(r);
            hi = hi.max(r);
        }
        Ok(Self { boundary: Arc::new(boundary), center: [0.0, 0.0], linear: IDENTITY, rho_min: lo, rho_max: hi })
    }

    /// Disk of the given radius about the origin.
    pub fn disk(radius: f64) -> Result<Self> {
        Self::new(move |_| radius)
    }

    /// Replace the affine frame `x = c + M y`.
    pub fn with_frame(mut self, center: Point, linear: Matrix2) -> Result<Self> {
        if mat_inv(&linear).is_none() {
            return Err(LabError::Degenerate("singular linear map".into()));
        }
        self.center = center;
        self.linear = linear;
        Ok(self)
    }

    pub fn radius(&self, theta: f64) -> f64 {
        (self.boundary)(theta)
    }

    pub fn rho_bounds(&self) -> (f64, f64) {
        (self.rho_min, self.rho_max)
    }

    pub fn det(&self) -> f64 {
        mat_det(&self.linear).abs()
    }

    pub fn is_standard_frame(&self) -> bool {
        self.center == [0.0, 0.0] && self.linear == IDENTITY
    }

    pub fn measure(&self) -> f64 {
        let n = STAR_SAMPLES;
        let dt = 2.0 * PI / n as f64;
        let s: f64 = (0..n)
            .map(|k| {
                let r = self.radius((k as f64 + 0.5) * dt);
                0.5 * r * r
            })
            .sum();
        self.det() * s * dt
    }

    pub fn to_reference(&self, x: &Point) -> Point {
        let inv = mat_inv(&self.linear).expect("frame is invertible");
        mat_apply(&inv, &[x[0] - self.center[0], x[1] - self.center[1]])
    }

    pub fn from_reference(&self, y: &Point) -> Point {
        let m = mat_apply(&self.linear, y);
        [m[0] + self.center[0], m[1] + self.center[1]]
    }

    pub fn contains(&self, x: &Point) -> bool {
        let y = self.to_reference(x);
        let r = y[0].hypot(y[1]);
        if r == 0.0 {
            return true;
        }
        let theta = y[1].atan2(y[0]).rem_euclid(2.0 * PI);
        r <= self.radius(theta)
    }

    /// `|S cap (c' + A B)|` by exact radial integration along `n_theta` rays of the reference frame.
    pub fn overlap_with_ellipse(&self, center: &Point, axes: &Matrix2, n_theta: usize) -> f64 {
        let Some(ainv) = mat_inv(axes) else { return 0.0 };
        // In reference coordinates the ellipse is {y : |W y - w0| <= 1} with W = A^{-1} M.
        let w = mat_mul(&ainv, &self.linear);
        let shift = mat_apply(&ainv, &[self.center[0] - center[0], self.center[1] - center[1]]);
        let dt = 2.0 * PI / n_theta as f64;
        let mut acc = 0.0;
        for k in 0..n_theta {
            let theta = (k as f64 + 0.5) * dt;
            let u = [theta.cos(), theta.sin()];
            let v = mat_apply(&w, &u);
            if let Some((r1, r2)) = ray_disk_interval(&shift, &v) {
                let rho = self.radius(theta);
                let lo = r1.max(0.0);
                let hi = r2.min(rho);
                if hi > lo {
                    acc += 0.5 * (hi * hi - lo * lo);
                }
            }
        }
        self.det() * acc * dt
    }
}

/// Sets resolved at the level of a uniform cell lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMask {
    pub dim: usize,
    pub origin: Point,
    pub h: f64,
    pub shape: [usize; 2],
    pub mask: Vec<bool>,
}

impl GridMask {
    pub fn new(dim: usize, origin: Point, h: f64, shape: [usize; 2], mask: Vec<bool>) -> Result<Self> {
        check_dim(dim)?;
        let shape = if dim == 1 { [shape[0], 1] } else { shape };
        if !(h > 0.0) || mask.len() != shape[0] * shape[1] {
            return Err(LabError::InvalidParameter("grid mask shape mismatch".into()));
        }
        Ok(Self { dim, origin, h, shape, mask })
    }

    /// Rasterize a predicate at cell centers.
    pub fn rasterize(
        dim: usize,
        origin: Point,
        h: f64,
        shape: [usize; 2],
        inside: impl Fn(&Point) -> bool,
    ) -> Result<Self> {
        let shape = if dim == 1 { [shape[0], 1] } else { shape };
        let mut mask = Vec::with_capacity(shape[0] * shape[1]);
        for j in 0..shape[1] {
            for i in 0..shape[0] {
                mask.push(inside(&Self::center_of(dim, &origin, h, i, j)));
            }
        }
        Self::new(dim, origin, h, shape, mask)
    }

    fn center_of(dim: usize, origin: &Point, h: f64, i: usize, j: usize) -> Point {
        let x = origin[0] + (i as f64 + 0.5) * h;
        let y = if dim == 1 { 0.0 } else { origin[1] + (j as f64 + 0.5) * h };
        [x, y]
    }

    pub fn cell_measure(&self) -> f64 {
        self.h.powi(self.dim as i32)
    }

    pub fn measure(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 * self.cell_measure()
    }

    pub fn cell_of(&self, x: &Point) -> Option<(usize, usize)> {
        let i = ((x[0] - self.origin[0]) / self.h).floor();
        let j = if self.dim == 1 { 0.0 } else { ((x[1] - self.origin[1]) / self.h).floor() };
        if i < 0.0 || j < 0.0 || i >= self.shape[0] as f64 || j >= self.shape[1] as f64 {
            None
        } else {
            Some((i as usize, j as usize))
        }
    }

    pub fn contains(&self, x: &Point) -> bool {
        self.cell_of(x).is_some_and(|(i, j)| self.mask[j * self.shape[0] + i])
    }

    /// Centers of the cells in the set.
    pub fn cells(&self) -> impl Iterator<Item = Point> + '_ {
        (0..self.shape[1]).flat_map(move |j| {
            (0..self.shape[0])
                .filter(move |&i| self.mask[j * self.shape[0] + i])
                .map(move |i| Self::center_of(self.dim, &self.origin, self.h, i, j))
        })
    }

    /// Maximal runs of set cells as intervals (dimension one).
    pub fn runs(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        let mut start: Option<usize> = None;
        for i in 0..=self.shape[0] {
            let on = i < self.shape[0] && self.mask[i];
            match (on, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    out.push((self.origin[0] + s as f64 * self.h, self.origin[0] + i as f64 * self.h));
                    start = None;
                }
                _ => {}
            }
        }
        out
    }
}

/// Support descriptor `E`.
#[derive(Debug, Clone)]
pub enum SupportSet {
    Ball { dim: usize, radius: f64 },
    IntervalUnion(Vec<(f64, f64)>),
    RadialPerturbation(StarSet),
    GridMask(GridMask),
}

impl SupportSet {
    pub fn unit_ball(d: usize) -> Self {
        SupportSet::Ball { dim: d, radius: 1.0 }
    }

    /// Validated union of disjoint intervals, sorted by left endpoint.
    pub fn intervals(mut list: Vec<(f64, f64)>) -> Result<Self> {
        if list.is_empty() {
            return Err(LabError::InvalidParameter("empty interval list".into()));
        }
        list.sort_by(|a, b| a.0.total_cmp(&b.0));
        for &(a, b) in &list {
            if !(a.is_finite() && b.is_finite() && b > a) {
                return Err(LabError::InvalidParameter(format!("bad interval [{a}, {b}]")));
            }
        }
        for w in list.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(LabError::InvalidParameter(format!(
                    "intervals [{}, {}] and [{}, {}] overlap",
                    w[0].0, w[0].1, w[1].0, w[1].1
                )));
            }
        }
        Ok(SupportSet::IntervalUnion(list))
    }

    pub fn interval(a: f64, b: f64) -> Result<Self> {
        Self::intervals(vec![(a, b)])
    }

    pub fn star(star: StarSet) -> Self {
        SupportSet::RadialPerturbation(star)
    }

    pub fn dim(&self) -> usize {
        match self {
            SupportSet::Ball { dim, .. } => *dim,
            SupportSet::IntervalUnion(_) => 1,
            SupportSet::RadialPerturbation(_) => 2,
            SupportSet::GridMask(m) => m.dim,
        }
    }

    /// Interval representation in dimension one.
    pub fn as_intervals(&self) -> Option<Vec<(f64, f64)>> {
        match self {
            SupportSet::Ball { dim: 1, radius } => Some(vec![(-radius, *radius)]),
            SupportSet::IntervalUnion(v) => Some(v.clone()),
            SupportSet::GridMask(m) if m.dim == 1 => Some(m.runs()),
            _ => None,
        }
    }

    /// Star-set representation in dimension two.
    pub fn as_star(&self) -> Option<StarSet> {
        match self {
            SupportSet::Ball { dim: 2, radius } => StarSet::disk(*radius).ok(),
            SupportSet::RadialPerturbation(s) => Some(s.clone()),
            _ => None,
        }
    }

    pub fn measure(&self) -> f64 {
        match self {
            SupportSet::Ball { dim, radius } => ball_volume(*dim) * radius.powi(*dim as i32),
            SupportSet::IntervalUnion(v) => v.iter().map(|(a, b)| b - a).sum(),
            SupportSet::RadialPerturbation(s) => s.measure(),
            SupportSet::GridMask(m) => m.measure(),
        }
    }

    pub fn contains(&self, x: &Point) -> bool {
        match self {
            SupportSet::Ball { radius, .. } => x[0].hypot(x[1]) <= *radius,
            SupportSet::IntervalUnion(v) => v.iter().any(|&(a, b)| x[0] >= a && x[0] <= b),
            SupportSet::RadialPerturbation(s) => s.contains(x),
            SupportSet::GridMask(m) => m.contains(x),
        }
    }

    /// `|E Delta B|` against the unit ball of the same dimension.
    pub fn sym_diff_ball(&self) -> f64 {
        let d = self.dim();
        if let Some(iv) = self.as_intervals() {
            let inter: f64 = iv.iter().map(|&(a, b)| (b.min(1.0) - a.max(-1.0)).max(0.0)).sum();
            return self.measure() + 2.0 - 2.0 * inter;
        }
        match self {
            SupportSet::GridMask(m) => {
                // Cell-level resolution: B is rasterized on the mask lattice, extended to cover B.
                let h = m.h;
                let lo = [m.origin[0].min(-1.0 - h), m.origin[1].min(-1.0 - h)];
                let i0 = ((lo[0] - m.origin[0]) / h).floor() as i64;
                let j0 = ((lo[1] - m.origin[1]) / h).floor() as i64;
                let i1 = (m.shape[0] as i64).max(((1.0 + h - m.origin[0]) / h).ceil() as i64);
                let j1 = (m.shape[1] as i64).max(((1.0 + h - m.origin[1]) / h).ceil() as i64);
                let mut count = 0usize;
                for j in j0..j1 {
                    for i in i0..i1 {
                        let c = [m.origin[0] + (i as f64 + 0.5) * h, m.origin[1] + (j as f64 + 0.5) * h];
                        let in_e = i >= 0
                            && j >= 0
                            && (i as usize) < m.shape[0]
                            && (j as usize) < m.shape[1]
                            && m.mask[j as usize * m.shape[0] + i as usize];
                        let in_b = c[0].hypot(c[1]) <= 1.0;
                        if in_e != in_b {
                            count += 1;
                        }
                    }
                }
                count as f64 * m.cell_measure()
            }
            _ => {
                let star = self.as_star().expect("planar star set");
                let inter = star.overlap_with_ellipse(&[0.0, 0.0], &IDENTITY, 8192);
                star.measure() + ball_volume(d) - 2.0 * inter
            }
        }
    }

    /// Image under `x -> A x + c`.
    pub fn map_affine(&self, a: &Matrix2, c: &Point) -> Result<Self> {
        let det = if self.dim() == 1 { a[0][0] } else { mat_det(a) };
        if det == 0.0 || !det.is_finite() {
            return Err(LabError::Degenerate("singular affine map".into()));
        }
        match self {
            SupportSet::IntervalUnion(_) | SupportSet::Ball { dim: 1, .. } => {
                let iv = self.as_intervals().expect("one-dimensional");
                let s = a[0][0];
                let mapped = iv
                    .iter()
                    .map(|&(lo, hi)| {
                        let (x, y) = (s * lo + c[0], s * hi + c[0]);
                        (x.min(y), x.max(y))
                    })
                    .collect();
                Self::intervals(mapped)
            }
            SupportSet::Ball { .. } | SupportSet::RadialPerturbation(_) => {
                let star = self.as_star().expect("planar star set");
                let center = mat_apply(a, &star.center);
                let linear = mat_mul(a, &star.linear);
                Ok(SupportSet::RadialPerturbation(star.with_frame([center[0] + c[0], center[1] + c[1]], linear)?))
            }
            SupportSet::GridMask(m) => {
                let s = a[0][0];
                let uniform = s > 0.0 && (m.dim == 1 || (a[1][1] == s && a[0][1] == 0.0 && a[1][0] == 0.0));
                if !uniform {
                    return Err(LabError::InvalidParameter(
                        "grid masks support only positive uniform scalings and translations".into(),
                    ));
                }
                let origin = [s * m.origin[0] + c[0], if m.dim == 1 { 0.0 } else { s * m.origin[1] + c[1] }];
                Ok(SupportSet::GridMask(GridMask::new(m.dim, origin, s * m.h, m.shape, m.mask.clone())?))
            }
        }
    }

    /// Dilation `x -> lambda x`.
    pub fn dilate(&self, lambda: f64) -> Result<Self> {
        self.map_affine(&[[lambda, 0.0], [0.0, lambda]], &[0.0, 0.0])
    }
}

/// One-dimensional rule applied inside each cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rule {
    Midpoint,
    Gauss(usize),
}

impl Rule {
    fn unit_nodes(&self) -> Vec<(f64, f64)> {
        match self {
            Rule::Midpoint => vec![(0.5, 1.0)],
            Rule::Gauss(p) => gauss_legendre(*p).on(0.0, 1.0).collect(),
        }
    }

    fn points_per_cell(&self) -> usize {
        match self {
            Rule::Midpoint => 1,
            Rule::Gauss(p) => *p,
        }
    }

    /// Error order of the composite rule for smooth integrands.
    pub fn order(&self) -> u32 {
        match self {
            Rule::Midpoint => 2,
            Rule::Gauss(p) => 2 * *p as u32,
        }
    }
}

/// Spatial discretization parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub rule: Rule,
    /// Target cell width (radial cell width in the polar grid).
    pub cell: f64,
    /// Number of rays of the polar grid.
    pub angular: usize,
}

impl GridSpec {
    pub fn default_for(d: usize) -> Self {
        if d == 1 {
            GridSpec { rule: Rule::Midpoint, cell: 1.0 / 1024.0, angular: 1 }
        } else {
            GridSpec { rule: Rule::Gauss(4), cell: 1.0 / 16.0, angular: 256 }
        }
    }

    pub fn midpoint(cell: f64) -> Self {
        GridSpec { rule: Rule::Midpoint, cell, angular: 256 }
    }

    /// Same rule with cells scaled by `factor` (angular count scaled inversely in the plane).
    pub fn scaled(&self, factor: f64) -> Self {
        GridSpec {
            rule: self.rule,
            cell: self.cell * factor,
            angular: ((self.angular as f64 / factor).round() as usize).max(8),
        }
    }
}

/// Quadrature nodes covering `E union B` with membership flags.
#[derive(Debug, Clone)]
pub struct Grid {
    pub dim: usize,
    pub nodes: Vec<Point>,
    pub weights: Vec<f64>,
    pub in_support: Vec<bool>,
    pub in_ball: Vec<bool>,
    /// Largest node spacing along any direction.
    pub spacing: f64,
    /// Index of the node at `-x`, when the grid is symmetric.
    pub reflection: Option<Vec<usize>>,
    pub spec: GridSpec,
}

fn merge_sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    let mut out: Vec<f64> = Vec::with_capacity(v.len());
    for x in v {
        match out.last() {
            Some(&l) if (x - l).abs() <= 1e-13 * (1.0 + x.abs()) => {}
            _ => out.push(x),
        }
    }
    out
}

impl Grid {
    /// Resolvable frequency of the grid.
    pub fn nyquist(&self) -> f64 {
        0.5 / self.spacing
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_symmetric(&self) -> bool {
        self.reflection.is_some()
    }

    /// Grid on `E union B` (and `-E` in dimension one, keeping the grid symmetric).
    pub fn covering(support: &SupportSet, spec: &GridSpec) -> Result<Self> {
        let d = support.dim();
        check_dim(d)?;
        if !(spec.cell > 0.0) {
            return Err(LabError::InvalidParameter("cell width must be positive".into()));
        }
        if d == 1 {
            let iv = support.as_intervals().expect("one-dimensional support");
            let cell = match support {
                SupportSet::GridMask(m) => spec.cell.min(m.h),
                _ => spec.cell,
            };
            return Ok(Self::line(&iv, cell, spec));
        }
        match support {
            SupportSet::GridMask(m) => Ok(Self::tensor_mask(m, spec)),
            _ => Ok(Self::polar(&support.as_star().expect("planar star set"), spec)),
        }
    }

    fn line(iv: &[(f64, f64)], cell: f64, spec: &GridSpec) -> Self {
        let mut pieces: Vec<(f64, f64)> = iv.to_vec();
        pieces.extend(iv.iter().map(|&(a, b)| (-b, -a)));
        pieces.push((-1.0, 1.0));
        let breaks = merge_sorted(pieces.iter().flat_map(|&(a, b)| [a, b]).collect());
        let covered = |x: f64| pieces.iter().any(|&(a, b)| x > a && x < b);
        let unit = spec.rule.unit_nodes();
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        let mut max_h: f64 = 0.0;
        for w in breaks.windows(2) {
            let (a, b) = (w[0], w[1]);
            if !covered(0.5 * (a + b)) {
                continue;
            }
            let m = (((b - a) / cell) - 1e-9).ceil().max(1.0) as usize;
            let h = (b - a) / m as f64;
            max_h = max_h.max(h);
            for k in 0..m {
                for &(t, wt) in &unit {
                    nodes.push([a + (k as f64 + t) * h, 0.0]);
                    weights.push(wt * h);
                }
            }
        }
        let in_support: Vec<bool> = nodes.iter().map(|x| iv.iter().any(|&(a, b)| x[0] > a && x[0] < b)).collect();
        let in_ball: Vec<bool> = nodes.iter().map(|x| x[0].abs() < 1.0).collect();
        let n = nodes.len();
        let symmetric = (0..n).all(|i| {
            (nodes[i][0] + nodes[n - 1 - i][0]).abs() <= 1e-12 && (weights[i] - weights[n - 1 - i]).abs() <= 1e-15
        });
        let reflection = symmetric.then(|| (0..n).rev().collect());
        Grid {
            dim: 1,
            nodes,
            weights,
            in_support,
            in_ball,
            spacing: max_h / spec.rule.points_per_cell() as f64,
            reflection,
            spec: spec.clone(),
        }
    }

    fn polar(star: &StarSet, spec: &GridSpec) -> Self {
        let nt = spec.angular.max(8);
        let dt = 2.0 * PI / nt as f64;
        let det = star.det();
        let unit = spec.rule.unit_nodes();
        let norm_m = mat_norm(&star.linear);
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        let mut in_support = Vec::new();
        let mut in_ball = Vec::new();
        let mut ray_start = Vec::with_capacity(nt + 1);
        let mut ray_radii: Vec<Vec<f64>> = Vec::with_capacity(nt);
        let mut spacing: f64 = 0.0;
        for j in 0..nt {
            let theta = (j as f64 + 0.5) * dt;
            let u = [theta.cos(), theta.sin()];
            let rho = star.radius(theta);
            let mut bps = vec![0.0, rho];
            let v = mat_apply(&star.linear, &u);
            let ball = ray_disk_interval(&star.center, &v).filter(|&(_, r2)| r2 > 0.0);
            if let Some((r1, r2)) = ball {
                bps.push(r1.max(0.0));
                bps.push(r2);
            }
            let bps = merge_sorted(bps);
            let r_end = *bps.last().unwrap();
            spacing = spacing.max(dt * r_end * norm_m);
            ray_start.push(nodes.len());
            let mut radii = Vec::new();
            for w in bps.windows(2) {
                let (a, b) = (w[0], w[1]);
                if b - a <= 1e-14 {
                    continue;
                }
                let m = (((b - a) / spec.cell) - 1e-9).ceil().max(1.0) as usize;
                let h = (b - a) / m as f64;
                spacing = spacing.max(h * v[0].hypot(v[1]) / spec.rule.points_per_cell() as f64);
                for k in 0..m {
                    for &(t, wt) in &unit {
                        let r = a + (k as f64 + t) * h;
                        radii.push(r);
                        nodes.push(star.from_reference(&[r * u[0], r * u[1]]));
                        weights.push(det * r * wt * h * dt);
                        in_support.push(r < rho);
                        in_ball.push(ball.is_some_and(|(r1, r2)| r > r1 && r < r2));
                    }
                }
            }
            ray_radii.push(radii);
        }
        ray_start.push(nodes.len());
        let reflection = if nt.is_multiple_of(2) && star.center == [0.0, 0.0] {
            let half = nt / 2;
            let ok = (0..nt).all(|j| {
                let a = &ray_radii[j];
                let b = &ray_radii[(j + half) % nt];
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12)
            });
            ok.then(|| {
                let mut map = vec![0; nodes.len()];
                for j in 0..nt {
                    let jj = (j + half) % nt;
                    for k in 0..ray_radii[j].len() {
                        map[ray_start[j] + k] = ray_start[jj] + k;
                    }
                }
                map
            })
        } else {
            None
        };
        Grid { dim: 2, nodes, weights, in_support, in_ball, spacing, reflection, spec: spec.clone() }
    }

    fn tensor_mask(m: &GridMask, spec: &GridSpec) -> Self {
        let h = m.h;
        let i0 = (((-1.0 - m.origin[0]) / h).floor() as i64).min(0);
        let j0 = (((-1.0 - m.origin[1]) / h).floor() as i64).min(0);
        let i1 = (m.shape[0] as i64).max(((1.0 - m.origin[0]) / h).ceil() as i64);
        let j1 = (m.shape[1] as i64).max(((1.0 - m.origin[1]) / h).ceil() as i64);
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        let mut in_support = Vec::new();
        let mut in_ball = Vec::new();
        for j in j0..j1 {
            for i in i0..i1 {
                let c = [m.origin[0] + (i as f64 + 0.5) * h, m.origin[1] + (j as f64 + 0.5) * h];
                let in_e = i >= 0
                    && j >= 0
                    && (i as usize) < m.shape[0]
                    && (j as usize) < m.shape[1]
                    && m.mask[j as usize * m.shape[0] + i as usize];
                let in_b = c[0].hypot(c[1]) <= 1.0;
                if in_e || in_b {
                    nodes.push(c);
                    weights.push(h * h);
                    in_support.push(in_e);
                    in_ball.push(in_b);
                }
            }
        }
        // Symmetric when reflecting every node lands on a node.
        let mut index: HashMap<(i64, i64), usize> = HashMap::new();
        let key = |p: &Point| ((p[0] / h * 2.0).round() as i64, (p[1] / h * 2.0).round() as i64);
        for (k, p) in nodes.iter().enumerate() {
            index.insert(key(p), k);
        }
        let reflection: Option<Vec<usize>> = nodes
            .iter()
            .map(|p| {
                let k = *index.get(&key(&[-p[0], -p[1]]))?;
                ((nodes[k][0] + p[0]).abs() < 1e-12 && (nodes[k][1] + p[1]).abs() < 1e-12).then_some(k)
            })
            .collect();
        Grid { dim: 2, nodes, weights, in_support, in_ball, spacing: h, reflection, spec: spec.clone() }
    }

    /// Weighted measure of the support nodes.
    pub fn support_measure(&self) -> f64 {
        self.weights.iter().zip(&self.in_support).filter(|(_, &s)| s).map(|(w, _)| w).sum()
    }

    /// Per-axis extent of the nodes, padded by one spacing.
    pub fn extent(&self) -> f64 {
        extent_of(&self.nodes, self.dim) + 2.0 * self.spacing
    }
}

fn extent_of(nodes: &[Point], dim: usize) -> f64 {
    let mut w: f64 = 0.0;
    for axis in 0..dim {
        let lo = nodes.iter().map(|p| p[axis]).fold(f64::INFINITY, f64::min);
        let hi = nodes.iter().map(|p| p[axis]).fold(f64::NEG_INFINITY, f64::max);
        if hi >= lo {
            w = w.max(hi - lo);
        }
    }
    w
}

pub type Field = Arc<dyn Fn(&Point) -> f64 + Send + Sync>;

/// Candidate `f e^{ig} 1_E` sampled on a grid covering `E union B`.
#[derive(Clone)]
pub struct TrialFunction {
    support: SupportSet,
    spec: GridSpec,
    modulus: Field,
    phase: Field,
    grid: Arc<Grid>,
    f: Vec<f64>,
    g: Vec<f64>,
}

impl fmt::Debug for TrialFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TrialFunction")
            .field("support", &self.support)
            .field("spec", &self.spec)
            .field("nodes", &self.grid.len())
            .finish()
    }
}

impl TrialFunction {
    pub fn new(
        support: SupportSet,
        spec: GridSpec,
        modulus: impl Fn(&Point) -> f64 + Send + Sync + 'static,
        phase: impl Fn(&Point) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        Self::from_fields(support, spec, Arc::new(modulus), Arc::new(phase))
    }

    pub fn from_fields(support: SupportSet, spec: GridSpec, modulus: Field, phase: Field) -> Result<Self> {
        if !(support.measure() > 0.0) || !support.measure().is_finite() {
            return Err(LabError::InvalidParameter("support must have finite positive measure".into()));
        }
        let grid = Arc::new(Grid::covering(&support, &spec)?);
        let mut f = vec![0.0; grid.len()];
        let mut g = vec![0.0; grid.len()];
        for (k, x) in grid.nodes.iter().enumerate() {
            if grid.in_support[k] {
                let fv = modulus(x);
                let gv = phase(x);
                if !(-1e-12..=1.0 + 1e-12).contains(&fv) || !gv.is_finite() {
                    return Err(LabError::InvalidParameter(format!(
                        "modulus must lie in [0,1] and phase be finite; got f={fv}, g={gv} at {x:?}"
                    )));
                }
                f[k] = fv.clamp(0.0, 1.0);
                g[k] = gv;
            }
        }
        Ok(Self { support, spec, modulus, phase, grid, f, g })
    }

    /// `1_E` with the default grid for its dimension.
    pub fn indicator(support: SupportSet) -> Result<Self> {
        let spec = GridSpec::default_for(support.dim());
        Self::indicator_with(support, spec)
    }

    pub fn indicator_with(support: SupportSet, spec: GridSpec) -> Result<Self> {
        Self::new(support, spec, |_| 1.0, |_| 0.0)
    }

    /// The extremizer `1_B`.
    pub fn ball(d: usize) -> Result<Self> {
        Self::indicator(SupportSet::unit_ball(d))
    }

    pub fn dim(&self) -> usize {
        self.support.dim()
    }

    pub fn support(&self) -> &SupportSet {
        &self.support
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn grid_arc(&self) -> Arc<Grid> {
        self.grid.clone()
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn f(&self) -> &[f64] {
        &self.f
    }

    pub fn g(&self) -> &[f64] {
        &self.g
    }

    pub fn modulus_field(&self) -> Field {
        self.modulus.clone()
    }

    pub fn phase_field(&self) -> Field {
        self.phase.clone()
    }

    /// Measure of `E` from the quadrature weights.
    pub fn measure(&self) -> f64 {
        self.grid.support_measure()
    }

    /// Same fields on a different grid.
    pub fn resample(&self, spec: GridSpec) -> Result<Self> {
        Self::from_fields(self.support.clone(), spec, self.modulus.clone(), self.phase.clone())
    }

    pub fn with_phase(&self, phase: Field) -> Result<Self> {
        Self::from_fields(self.support.clone(), self.spec.clone(), self.modulus.clone(), phase)
    }

    pub fn with_modulus(&self, modulus: Field) -> Result<Self> {
        Self::from_fields(self.support.clone(), self.spec.clone(), modulus, self.phase.clone())
    }

    /// Push-forward under `phi(x) = A x + c`: `t'(y) = t(phi^{-1}(y))`, supported on `phi(E)`.
    pub fn map_affine(&self, a: &Matrix2, c: &Point) -> Result<Self> {
        let d = self.dim();
        let a = if d == 1 { [[a[0][0], 0.0], [0.0, 1.0]] } else { *a };
        let inv = mat_inv(&a).ok_or_else(|| LabError::Degenerate("singular affine map".into()))?;
        let support = self.support.map_affine(&a, c)?;
        let c = *c;
        let pre = move |y: &Point| -> Point {
            let z = mat_apply(&inv, &[y[0] - c[0], y[1] - c[1]]);
            if d == 1 {
                [z[0], 0.0]
            } else {
                z
            }
        };
        let (m, p) = (self.modulus.clone(), self.phase.clone());
        let modulus: Field = Arc::new(move |y| m(&pre(y)));
        let phase: Field = Arc::new(move |y| p(&pre(y)));
        let scale = if d == 1 { a[0][0].abs() } else { mat_det(&a).abs().sqrt() };
        Self::from_fields(support, self.spec.scaled(scale), modulus, phase)
    }

    /// Pull-back `t'(y) = t(A y + c)`, supported on `phi^{-1}(E)`.
    pub fn pullback(&self, a: &Matrix2, c: &Point) -> Result<Self> {
        let d = self.dim();
        let a = if d == 1 { [[a[0][0], 0.0], [0.0, 1.0]] } else { *a };
        let inv = mat_inv(&a).ok_or_else(|| LabError::Degenerate("singular affine map".into()))?;
        let shift = mat_apply(&inv, c);
        self.map_affine(&inv, &[-shift[0], -shift[1]])
    }

    /// Dilate so that `E` becomes `lambda E`.
    pub fn dilate(&self, lambda: f64) -> Result<Self> {
        self.map_affine(&[[lambda, 0.0], [0.0, lambda]], &[0.0, 0.0])
    }

    /// Value `f e^{ig}` at node `k` (zero off the support).
    pub fn value(&self, k: usize) -> Complex64 {
        if self.grid.in_support[k] {
            Complex64::from_polar(self.f[k], self.g[k])
        } else {
            Complex64::new(0.0, 0.0)
        }
    }

    pub fn values(&self) -> Vec<Complex64> {
        (0..self.grid.len()).map(|k| self.value(k)).collect()
    }

    /// Transform samples for this trial.
    pub fn samples(&self) -> Samples {
        Samples::from_values(&self.grid, &self.values())
    }
}

/// Weighted point masses `sum_n c_n delta_{x_n}` whose transform approximates `u^`.
#[derive(Debug, Clone)]
pub struct Samples {
    pub dim: usize,
    pub nodes: Vec<Point>,
    pub coef: Vec<Complex64>,
    pub nyquist: f64,
    pub extent: f64,
}

impl Samples {
    /// Coefficients `w_k v_k`; zero entries are dropped.
    pub fn from_values(grid: &Grid, values: &[Complex64]) -> Self {
        let mut nodes = Vec::new();
        let mut coef = Vec::new();
        for (k, v) in values.iter().enumerate() {
            if *v != Complex64::new(0.0, 0.0) {
                nodes.push(grid.nodes[k]);
                coef.push(v * grid.weights[k]);
            }
        }
        Samples { dim: grid.dim, nodes, coef, nyquist: grid.nyquist(), extent: grid.extent() }
    }

    pub fn from_real(grid: &Grid, values: &[f64]) -> Self {
        let v: Vec<Complex64> = values.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        Self::from_values(grid, &v)
    }

    pub fn is_zero(&self) -> bool {
        self.coef.is_empty()
    }

    pub fn mass(&self) -> Complex64 {
        pairwise_sum_c(&self.coef)
    }

    /// Direct transform at one frequency.
    pub fn transform(&self, xi: &Point) -> Complex64 {
        let terms: Vec<Complex64> = self
            .nodes
            .iter()
            .zip(&self.coef)
            .map(|(x, c)| c * Complex64::from_polar(1.0, -2.0 * PI * (x[0] * xi[0] + x[1] * xi[1])))
            .collect();
        pairwise_sum_c(&terms)
    }

    /// Transform at every point of `runs`, in order.
    pub fn transform_runs(&self, runs: &[Run], step: f64) -> Vec<Complex64> {
        const BLOCK: usize = 64;
        let steps: Vec<Complex64> =
            self.nodes.iter().map(|x| Complex64::from_polar(1.0, -2.0 * PI * x[0] * step)).collect();
        let mut blocks: Vec<(Point, usize)> = Vec::new();
        for run in runs {
            let mut k = 0;
            while k < run.count {
                let n = BLOCK.min(run.count - k);
                blocks.push(([run.start[0] + k as f64 * step, run.start[1]], n));
                k += n;
            }
        }
        let parts: Vec<Vec<Complex64>> = blocks
            .par_iter()
            .map(|&(start, n)| {
                let mut z: Vec<Complex64> = self
                    .nodes
                    .iter()
                    .zip(&self.coef)
                    .map(|(x, c)| c * Complex64::from_polar(1.0, -2.0 * PI * (x[0] * start[0] + x[1] * start[1])))
                    .collect();
                let mut out = Vec::with_capacity(n);
                for _ in 0..n {
                    out.push(pairwise_sum_c(&z));
                    for (zi, si) in z.iter_mut().zip(&steps) {
                        *zi *= si;
                    }
                }
                out
            })
            .collect();
        parts.concat()
    }

    /// Transform on the lattice points with `lo < |xi| <= hi`.
    pub fn transform_shell(&self, lattice: &FreqLattice, lo: f64, hi: f64) -> (Vec<Point>, Vec<Complex64>) {
        let runs = lattice.runs(lo, hi);
        let values = self.transform_runs(&runs, lattice.spacing);
        let points = runs
            .iter()
            .flat_map(|r| (0..r.count).map(move |k| [r.start[0] + k as f64 * lattice.spacing, r.start[1]]))
            .collect();
        (points, values)
    }
}

/// Consecutive lattice points along the first axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Run {
    pub start: Point,
    pub count: usize,
}

/// Uniform frequency lattice `(k + offset) * spacing`, per axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreqLattice {
    pub dim: usize,
    pub spacing: f64,
    pub offset: f64,
}

impl FreqLattice {
    pub fn new(dim: usize, spacing: f64, offset: f64) -> Self {
        Self { dim, spacing, offset }
    }

    /// Lattice spacing free of aliasing for `|u^|^q` when `u` has per-axis extent `width`.
    pub fn alias_free_spacing(q: f64, width: f64) -> f64 {
        1.8 / (q.ceil() * width)
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.powi(self.dim as i32)
    }

    fn index_range(&self, bound: f64) -> (i64, i64) {
        // k with |(k + offset) spacing| <= bound.
        let lo = (-bound / self.spacing - self.offset).ceil() as i64;
        let hi = (bound / self.spacing - self.offset).floor() as i64;
        (lo, hi)
    }

    fn coord(&self, k: i64) -> f64 {
        (k as f64 + self.offset) * self.spacing
    }

    /// Runs covering the lattice points with `lo < |xi| <= hi`.
    pub fn runs(&self, lo: f64, hi: f64) -> Vec<Run> {
        let mut out = Vec::new();
        let push_range = |out: &mut Vec<Run>, a: i64, b: i64, y: f64| {
            if b >= a {
                out.push(Run { start: [self.coord(a), y], count: (b - a + 1) as usize });
            }
        };
        let segments = |bound_hi: f64, bound_lo: Option<f64>, y: f64, out: &mut Vec<Run>| {
            let (a, b) = self.index_range(bound_hi);
            let (a, b) = (a.max(-(1 << 40)), b.min(1 << 40));
            // Guard exact boundary membership.
            let a = if self.coord(a).abs() > bound_hi { a + 1 } else { a };
            let b = if self.coord(b).abs() > bound_hi { b - 1 } else { b };
            match bound_lo {
                None => push_range(out, a, b, y),
                Some(l) => {
                    let (c, d) = self.index_range(l);
                    let c = if self.coord(c).abs() > l { c + 1 } else { c };
                    let d = if self.coord(d).abs() > l { d - 1 } else { d };
                    if d < c {
                        push_range(out, a, b, y);
                    } else {
                        push_range(out, a, c - 1, y);
                        push_range(out, d + 1, b, y);
                    }
                }
            }
        };
        if self.dim == 1 {
            segments(hi, (lo > 0.0).then_some(lo), 0.0, &mut out);
            // lo == 0 excludes nothing: the point xi = 0 has |xi| = 0 which is not > 0,
            // so remove it explicitly when present.
            if lo == 0.0 {
                out = split_out_zero(out, self);
            }
            return out;
        }
        let (ja, jb) = self.index_range(hi);
        for j in ja..=jb {
            let y = self.coord(j);
            if y.abs() > hi {
                continue;
            }
            let bh = (hi * hi - y * y).max(0.0).sqrt();
            let bl = if lo > 0.0 && y.abs() < lo { Some((lo * lo - y * y).sqrt()) } else { None };
            let before = out.len();
            segments(bh, bl, y, &mut out);
            if lo == 0.0 && y == 0.0 {
                let tail = out.split_off(before);
                out.extend(split_out_zero(tail, self));
            }
        }
        out
    }

    /// Number of lattice points with `|xi| <= hi`.
    pub fn count(&self, hi: f64) -> usize {
        self.runs(-1.0, hi).iter().map(|r| r.count).sum()
    }
}

fn split_out_zero(runs: Vec<Run>, lattice: &FreqLattice) -> Vec<Run> {
    if lattice.offset != 0.0 {
        return runs;
    }
    let mut out = Vec::new();
    for r in runs {
        let k0 = (r.start[0] / lattice.spacing).round() as i64;
        let k1 = k0 + r.count as i64 - 1;
        if r.start[1] == 0.0 && k0 <= 0 && 0 <= k1 {
            if k0 < 0 {
                out.push(Run { start: r.start, count: (-k0) as usize });
            }
            if k1 > 0 {
                out.push(Run { start: [lattice.spacing, r.start[1]], count: k1 as usize });
            }
        } else {
            out.push(r);
        }
    }
    out
}

/// `(f e^{ig} 1_E)^(xi)` by quadrature on the trial's grid.
pub fn trial_transform(t: &TrialFunction, xi: &Point) -> Result<Complex64> {
    let r = xi[0].hypot(xi[1]);
    let nyquist = t.grid().nyquist();
    if r > nyquist {
        return Err(LabError::GridTooCoarse { xi: r, nyquist });
    }
    Ok(t.samples().transform(xi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Ball transform by direct radial/angular quadrature, independent of the Bessel code.
    fn ball_transform_quadrature(d: usize, rho: f64) -> f64 {
        let rule = gauss_legendre(40);
        if d == 1 {
            // int_{-1}^{1} cos(2 pi x rho) dx on 64 panels
            let mut s = 0.0;
            for p in 0..64 {
                let a = -1.0 + p as f64 / 32.0;
                for (x, w) in rule.on(a, a + 1.0 / 32.0) {
                    s += w * (2.0 * PI * x * rho).cos();
                }
            }
            s
        } else {
            let mut s = 0.0;
            for p in 0..32 {
                let a = p as f64 / 32.0;
                for (r, wr) in rule.on(a, a + 1.0 / 32.0) {
                    for q in 0..16 {
                        let b = q as f64 * PI / 16.0;
                        for (th, wt) in rule.on(b, b + PI / 16.0) {
                            s += wr * wt * r * (2.0 * PI * r * rho * th.cos()).cos();
                        }
                    }
                }
            }
            2.0 * s
        }
    }

    #[test]
    fn ball_transform_examples() {
        assert_eq!(ball_transform(1, 0.0), 2.0);
        assert!((ball_transform(2, 0.0) - PI).abs() < 1e-14);
        assert!(ball_transform(1, 0.5).abs() < 1e-15);
        assert!((ball_transform(3, 0.0) - 4.0 * PI / 3.0).abs() < 1e-13);
    }

    #[test]
    fn ball_transform_matches_direct_quadrature() {
        for d in 1..=2 {
            for k in 0..60 {
                let rho = k as f64 * 0.137;
                let a = ball_transform(d, rho);
                let b = ball_transform_quadrature(d, rho);
                assert!((a - b).abs() < 1e-10, "d={d} rho={rho}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn ball_transform_cache_is_consistent() {
        let bt = BallTransform::new(2);
        let a = bt.value(1.234);
        let b = bt.value(-1.234);
        assert_eq!(a, b);
        assert_eq!(a, ball_transform(2, 1.234));
        assert_eq!(bt.dimension(), 2);
    }

    #[test]
    fn decay_envelope_holds_on_dense_grid() {
        for d in 1..=2usize {
            let c = decay_constant(d).unwrap();
            let e = 0.5 * (d as f64 + 1.0);
            let h = 1e-4;
            for k in 0..200_000 {
                let rho = k as f64 * 3e-4;
                let v = ball_transform(d, rho);
                let grad = (ball_transform(d, rho + h) - ball_transform(d, (rho - h).abs())) / (2.0 * h);
                let lhs = (v.abs() + grad.abs()) * (1.0 + rho).powf(e);
                assert!(lhs <= c, "d={d} rho={rho} lhs={lhs}");
            }
        }
    }

    #[test]
    fn tail_bound_examples() {
        assert_eq!(tail_bound(1, 4.0, f64::INFINITY).unwrap(), 0.0);
        let c = C_ENVELOPE_D1;
        let expected = 2.0 * c.powi(4) / (3.0 * 11f64.powi(3));
        assert!((tail_bound(1, 4.0, 10.0).unwrap() - expected).abs() < 1e-12 * expected);
        assert!(tail_bound(1, 4.0, 20.0).unwrap() < tail_bound(1, 4.0, 10.0).unwrap());
        assert!(matches!(envelope_tail(1, 1.0, 1.0, 1.0), Err(LabError::NonIntegrableTail { .. })));
        assert!(tail_bound(1, 2.0, 1.0).is_err());
    }

    #[test]
    fn tail_bound_dominates_numerical_envelope_integral() {
        for &(d, q) in &[(1usize, 4.0), (1, 3.5), (2, 4.0), (2, 3.0)] {
            let xi = 5.0;
            let a = q * (d as f64 + 1.0) / 2.0;
            // sigma * int_xi^R (1+r)^{-a} r^{d-1} dr with a far cutoff
            let rule = gauss_legendre(20);
            let mut s = 0.0;
            let mut x = xi;
            while x < 1e6 {
                let next = x * 1.5;
                for (r, w) in rule.on(x, next) {
                    s += w * (1.0 + r).powf(-a) * r.powi(d as i32 - 1);
                }
                x = next;
            }
            let numeric = s * sphere_area(d);
            let bound = envelope_tail(d, q, xi, 1.0).unwrap();
            assert!(bound >= numeric && bound < 2.0 * numeric, "d={d} q={q}");
        }
    }

    fn unit_trial(d: usize) -> TrialFunction {
        TrialFunction::ball(d).unwrap()
    }

    #[test]
    fn trial_transform_examples() {
        let t = unit_trial(1);
        let m = trial_transform(&t, &[0.0, 0.0]).unwrap();
        assert!((m.re - 2.0).abs() < 1e-12 && m.im.abs() < 1e-12);
        let v = trial_transform(&t, &[0.25, 0.0]).unwrap();
        assert!((v.re - 4.0 / PI).abs() < 1e-6 && v.im.abs() < 1e-12);

        let a = 0.3;
        let modulated = TrialFunction::new(
            SupportSet::unit_ball(1),
            GridSpec::default_for(1),
            |_| 1.0,
            move |x| 2.0 * PI * a * x[0],
        )
        .unwrap();
        for k in 0..20 {
            let xi = -3.0 + k as f64 * 0.31;
            let v = trial_transform(&modulated, &[xi, 0.0]).unwrap();
            assert!((v - Complex64::new(ball_transform(1, xi - a), 0.0)).norm() < 1e-5);
        }

        let t2 = unit_trial(2);
        let m2 = trial_transform(&t2, &[0.0, 0.0]).unwrap();
        assert!((m2.re - PI).abs() < 1e-10);
    }

    #[test]
    fn grid_too_coarse_is_reported() {
        let t = TrialFunction::indicator_with(SupportSet::unit_ball(1), GridSpec::midpoint(0.1)).unwrap();
        assert!(matches!(trial_transform(&t, &[6.0, 0.0]), Err(LabError::GridTooCoarse { .. })));
        assert!(trial_transform(&t, &[4.0, 0.0]).is_ok());
    }

    #[test]
    fn random_frequencies_agree_with_ball_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for d in 1..=2 {
            let t = unit_trial(d);
            let s = t.samples();
            for _ in 0..50 {
                let r: f64 = rng.random_range(0.0..8.0);
                let th: f64 = rng.random_range(0.0..2.0 * PI);
                let xi = if d == 1 { [r, 0.0] } else { [r * th.cos(), r * th.sin()] };
                let v = s.transform(&xi);
                let tol = if d == 1 { 2e-5 } else { 1e-7 };
                assert!((v.re - ball_transform(d, r)).abs() < tol && v.im.abs() < 1e-9, "d={d} r={r} v={v}");
            }
        }
    }

    #[test]
    fn midpoint_rule_converges_at_second_order() {
        // E = [-1, 0.7]; exact transform of an interval.
        let exact = |xi: f64| -> Complex64 {
            let (a, b) = (-1.0, 0.7);
            let w = -2.0 * PI * xi;
            (Complex64::from_polar(1.0, w * b) - Complex64::from_polar(1.0, w * a)) / Complex64::new(0.0, w)
        };
        let xi = 3.3;
        let errs: Vec<f64> = [1.0 / 32.0, 1.0 / 64.0, 1.0 / 128.0]
            .iter()
            .map(|&h| {
                let t = TrialFunction::new(
                    SupportSet::interval(-1.0, 0.7).unwrap(),
                    GridSpec::midpoint(h),
                    |x| 0.5 + 0.25 * x[0].cos(),
                    |_| 0.0,
                )
                .unwrap();
                let reference = {
                    let rule = gauss_legendre(30);
                    let mut s = Complex64::new(0.0, 0.0);
                    for p in 0..34 {
                        let a = -1.0 + p as f64 * 0.05;
                        for (x, w) in rule.on(a, a + 0.05) {
                            s += w * (0.5 + 0.25 * x.cos()) * Complex64::from_polar(1.0, -2.0 * PI * x * xi);
                        }
                    }
                    s
                };
                (trial_transform(&t, &[xi, 0.0]).unwrap() - reference).norm()
            })
            .collect();
        let order1 = (errs[0] / errs[1]).log2();
        let order2 = (errs[1] / errs[2]).log2();
        assert!(order1 >= 1.9 && order2 >= 1.9, "orders {order1} {order2}");
        let t =
            TrialFunction::indicator_with(SupportSet::interval(-1.0, 0.7).unwrap(), GridSpec::midpoint(1.0 / 512.0))
                .unwrap();
        assert!((trial_transform(&t, &[xi, 0.0]).unwrap() - exact(xi)).norm() < 1e-4);
    }

    #[test]
    fn grids_are_symmetric_and_measure_sets() {
        let t = TrialFunction::indicator(SupportSet::intervals(vec![(-1.0, 0.0), (0.5, 1.5)]).unwrap()).unwrap();
        assert!(t.grid().is_symmetric());
        assert!((t.measure() - 2.0).abs() < 1e-12);
        let star = StarSet::new(|th| 1.0 + 0.1 * (2.0 * th).cos()).unwrap();
        let area = star.measure();
        let t2 = TrialFunction::indicator(SupportSet::star(star)).unwrap();
        assert!(t2.grid().is_symmetric());
        assert!((t2.measure() - area).abs() < 1e-10);
        assert!((area - PI * (1.0 + 0.005)).abs() < 1e-10);
    }

    #[test]
    fn modulus_outside_unit_interval_is_rejected() {
        let r = TrialFunction::new(SupportSet::unit_ball(1), GridSpec::default_for(1), |_| 1.5, |_| 0.0);
        assert!(r.is_err());
        assert!(SupportSet::intervals(vec![(0.0, 1.0), (0.5, 2.0)]).is_err());
        assert!(StarSet::new(|_| -1.0).is_err());
    }

    #[test]
    fn symmetric_difference_with_ball() {
        let e = SupportSet::interval(-1.0, 1.2).unwrap();
        assert!((e.sym_diff_ball() - 0.2).abs() < 1e-14);
        let e = SupportSet::intervals(vec![(-1.0, 0.9), (1.0, 1.1)]).unwrap();
        assert!((e.sym_diff_ball() - 0.2).abs() < 1e-14);
        let disk = SupportSet::star(StarSet::disk(1.1).unwrap());
        assert!((disk.sym_diff_ball() - PI * 0.21).abs() < 1e-9);
        let shifted = SupportSet::unit_ball(2).map_affine(&IDENTITY, &[0.1, 0.0]).unwrap();
        // lens area of two unit disks at distance 0.1
        let lens = 2.0 * (0.05f64).acos() - 0.05 * (4.0f64 - 0.01).sqrt();
        assert!((shifted.sym_diff_ball() - 2.0 * (PI - lens)).abs() < 1e-7);
    }

    #[test]
    fn affine_maps_act_on_measure() {
        let e = SupportSet::unit_ball(2);
        let m = [[1.1, 0.3], [0.0, 0.7]];
        let img = e.map_affine(&m, &[0.2, -0.1]).unwrap();
        assert!((img.measure() - PI * 0.77).abs() < 1e-10);
        let t = TrialFunction::ball(2).unwrap().map_affine(&m, &[0.2, -0.1]).unwrap();
        assert!((t.measure() - PI * 0.77).abs() < 1e-9);
    }

    #[test]
    fn lattice_runs_partition_shells() {
        for dim in 1..=2 {
            for &offset in &[0.0, 0.5] {
                let lat = FreqLattice::new(dim, 0.37, offset);
                let all = lat.count(5.0);
                let inner: usize = lat.runs(-1.0, 2.0).iter().map(|r| r.count).sum();
                let outer: usize = lat.runs(2.0, 5.0).iter().map(|r| r.count).sum();
                assert_eq!(all, inner + outer);
                let mut brute = 0;
                for i in -40i64..=40 {
                    for j in if dim == 1 { 0..=0 } else { -40..=40 } {
                        let x = (i as f64 + offset) * 0.37;
                        let y = if dim == 1 { 0.0 } else { (j as f64 + offset) * 0.37 };
                        if x.hypot(y) <= 5.0 {
                            brute += 1;
                        }
                    }
                }
                assert_eq!(all, brute, "dim={dim} offset={offset}");
            }
        }
    }

    #[test]
    fn lattice_transform_matches_direct_sum() {
        let t = TrialFunction::new(
            SupportSet::interval(-0.7, 1.3).unwrap(),
            GridSpec::midpoint(1.0 / 256.0),
            |x| 0.5 + 0.5 * x[0].sin().abs(),
            |x| x[0] * x[0],
        )
        .unwrap();
        let s = t.samples();
        let lat = FreqLattice::new(1, 0.21, 0.5);
        let (pts, vals) = s.transform_shell(&lat, -1.0, 30.0);
        for (p, v) in pts.iter().zip(&vals) {
            assert!((s.transform(p) - v).norm() < 1e-11);
        }
        let t2 = TrialFunction::ball(2)
            .unwrap()
            .resample(GridSpec { rule: Rule::Midpoint, cell: 0.1, angular: 32 })
            .unwrap();
        let s2 = t2.samples();
        let lat2 = FreqLattice::new(2, 0.3, 0.0);
        let (pts, vals) = s2.transform_shell(&lat2, 1.0, 3.0);
        assert!(!pts.is_empty());
        for (p, v) in pts.iter().zip(&vals) {
            assert!((s2.transform(p) - v).norm() < 1e-11);
        }
    }

    proptest! {
        #[test]
        fn conjugate_symmetry_for_real_trials(a in -1.5f64..0.0, b in 0.1f64..1.5, xi in -20.0f64..20.0) {
            let t = TrialFunction::new(
                SupportSet::interval(a, b).unwrap(),
                GridSpec::midpoint(1.0 / 128.0),
                |x| 0.5 + 0.4 * x[0].sin(),
                |_| 0.0,
            ).unwrap();
            let s = t.samples();
            let p = s.transform(&[xi, 0.0]);
            let m = s.transform(&[-xi, 0.0]);
            prop_assert!((p - m.conj()).norm() < 1e-12);
        }

        #[test]
        fn modulation_translates_transform(a in -2.0f64..2.0, xi in -10.0f64..10.0) {
            let spec = GridSpec::midpoint(1.0 / 128.0);
            let base = TrialFunction::new(SupportSet::interval(-0.8, 1.1).unwrap(), spec.clone(), |x| 0.6 + 0.3 * x[0].cos(), |x| x[0] * x[0]).unwrap();
            let moved = TrialFunction::new(SupportSet::interval(-0.8, 1.1).unwrap(), spec, |x| 0.6 + 0.3 * x[0].cos(), move |x| x[0] * x[0] + 2.0 * PI * a * x[0]).unwrap();
            let lhs = moved.samples().transform(&[xi, 0.0]);
            let rhs = base.samples().transform(&[xi - a, 0.0]);
            prop_assert!((lhs - rhs).norm() < 1e-11);
        }
    }
}
