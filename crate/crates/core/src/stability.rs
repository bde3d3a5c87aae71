//! Distances to ellipsoids and to affine modulations, the three-way case split,
//! affine-normalized stability certificates and exponent-optimality sweeps.
//!
//! Both distances are normalized so that they lie in `[0, 2]`:
//! `dist(E, ellipsoids) = inf |E Delta Ell| / |E|` over ellipsoids with `|Ell| = |E|`, and
//! `dist_E(e^{ig}, affine) = inf_L ||e^{ig} - e^{iL}||_{L^2(E)} / |E|^{1/2}`.

use crate::error::{LabError, Result};
use crate::fit::{loglog_fit, LineFit};
use crate::functional::{deficit_with, volume_normalize, DeficitReport};
use crate::optimize::nelder_mead;
use crate::radial_fourier::{mat_apply, Field, GridSpec, Matrix2, Point, StarSet, SupportSet, TrialFunction};
use crate::report::fmt12;
use crate::special::ball_volume;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

/// Rays used for planar overlap integrals.
pub const OVERLAP_RAYS: usize = 2048;
/// Number of multistarts for the planar ellipse search.
pub const ELLIPSE_STARTS: usize = 8;
/// Fixed seed of the multistart generator.
pub const MULTISTART_SEED: u64 = 0x00e1_1175;

/// An ellipsoid `c + A B` described by its center, semi-axes and rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipsoidParams {
    pub dim: usize,
    pub center: Point,
    /// Semi-axes; in dimension one only the first entry is used (the half-length).
    pub axes: [f64; 2],
    /// Rotation angle of the first axis (dimension two).
    pub angle: f64,
}

impl EllipsoidParams {
    pub fn volume(&self) -> f64 {
        if self.dim == 1 {
            2.0 * self.axes[0]
        } else {
            PI * self.axes[0] * self.axes[1]
        }
    }

    /// Linear part `A` with the ellipsoid equal to `c + A B`.
    pub fn linear(&self) -> Matrix2 {
        if self.dim == 1 {
            [[self.axes[0], 0.0], [0.0, 1.0]]
        } else {
            let (s, c) = self.angle.sin_cos();
            [[c * self.axes[0], -s * self.axes[1]], [s * self.axes[0], c * self.axes[1]]]
        }
    }

    pub fn to_support(&self) -> Result<SupportSet> {
        if self.dim == 1 {
            SupportSet::interval(self.center[0] - self.axes[0], self.center[0] + self.axes[0])
        } else {
            Ok(SupportSet::star(StarSet::disk(1.0)?.with_frame(self.center, self.linear())?))
        }
    }
}

/// Best volume-matched ellipsoid found for a set.
#[derive(Debug, Clone, PartialEq)]
pub struct EllipsoidFit {
    /// `|E Delta Ell| / |E|` for the returned ellipsoid; an upper bound on the infimum.
    pub value: f64,
    pub params: EllipsoidParams,
    /// True when the minimization is exhaustive (dimension one).
    pub exact: bool,
    pub converged: bool,
}

/// Distance from `E` to volume-matched ellipsoids.
pub fn dist_ellipsoids(e: &SupportSet) -> Result<EllipsoidFit> {
    let m = e.measure();
    if !(m > 0.0) {
        return Err(LabError::InvalidParameter("set must have positive measure".into()));
    }
    if let Some(iv) = e.as_intervals() {
        return Ok(interval_fit(&iv, m));
    }
    planar_fit(e, m)
}

fn interval_overlap(iv: &[(f64, f64)], lo: f64, hi: f64) -> f64 {
    iv.iter().map(|&(a, b)| (b.min(hi) - a.max(lo)).max(0.0)).sum()
}

fn interval_fit(iv: &[(f64, f64)], m: f64) -> EllipsoidFit {
    // The overlap is piecewise linear in the center; its maximum sits at a breakpoint.
    let half = 0.5 * m;
    let mut best = (f64::NEG_INFINITY, 0.0);
    for &(a, b) in iv {
        for c in [a + half, a - half, b + half, b - half] {
            let o = interval_overlap(iv, c - half, c + half);
            if o > best.0 + 1e-15 {
                best = (o, c);
            }
        }
    }
    let value = (2.0 * (m - best.0) / m).clamp(0.0, 2.0);
    EllipsoidFit {
        value,
        params: EllipsoidParams { dim: 1, center: [best.1, 0.0], axes: [half, 0.0], angle: 0.0 },
        exact: true,
        converged: true,
    }
}

/// Centroid and second-moment matrix of a planar set.
fn planar_moments(e: &SupportSet) -> Result<(Point, [[f64; 2]; 2], f64)> {
    if let Some(star) = e.as_star() {
        let n = 4096;
        let dt = 2.0 * PI / n as f64;
        let (mut area, mut my, mut syy) = (0.0, [0.0; 2], [[0.0; 2]; 2]);
        for k in 0..n {
            let t = (k as f64 + 0.5) * dt;
            let u = [t.cos(), t.sin()];
            let r = star.radius(t);
            area += r * r / 2.0 * dt;
            for i in 0..2 {
                my[i] += r.powi(3) / 3.0 * u[i] * dt;
                for j in 0..2 {
                    syy[i][j] += r.powi(4) / 4.0 * u[i] * u[j] * dt;
                }
            }
        }
        let mean_y = [my[0] / area, my[1] / area];
        let mut cov_y = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                cov_y[i][j] = syy[i][j] / area - mean_y[i] * mean_y[j];
            }
        }
        let mmat = star.linear;
        let center = star.from_reference(&mean_y);
        // cov_x = M cov_y M^T
        let mut cov = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                for a in 0..2 {
                    for b in 0..2 {
                        cov[i][j] += mmat[i][a] * cov_y[a][b] * mmat[j][b];
                    }
                }
            }
        }
        return Ok((center, cov, star.measure()));
    }
    match e {
        SupportSet::GridMask(mask) => {
            let cells: Vec<Point> = mask.cells().collect();
            let n = cells.len() as f64;
            if n == 0.0 {
                return Err(LabError::InvalidParameter("empty grid mask".into()));
            }
            let c = [cells.iter().map(|p| p[0]).sum::<f64>() / n, cells.iter().map(|p| p[1]).sum::<f64>() / n];
            let mut cov = [[0.0; 2]; 2];
            for p in &cells {
                let d = [p[0] - c[0], p[1] - c[1]];
                for i in 0..2 {
                    for j in 0..2 {
                        cov[i][j] += d[i] * d[j] / n;
                    }
                }
            }
            Ok((c, cov, mask.measure()))
        }
        _ => Err(LabError::UnsupportedDimension(e.dim())),
    }
}

fn ellipse_overlap(e: &SupportSet, p: &EllipsoidParams) -> f64 {
    let a = p.linear();
    if let Some(star) = e.as_star() {
        return star.overlap_with_ellipse(&p.center, &a, OVERLAP_RAYS);
    }
    if let SupportSet::GridMask(mask) = e {
        let inv = crate::radial_fourier::mat_inv(&a).expect("non-degenerate ellipse");
        let inside = mask
            .cells()
            .filter(|c| {
                let y = mat_apply(&inv, &[c[0] - p.center[0], c[1] - p.center[1]]);
                y[0] * y[0] + y[1] * y[1] <= 1.0
            })
            .count();
        return inside as f64 * mask.cell_measure();
    }
    0.0
}

fn planar_fit(e: &SupportSet, m: f64) -> Result<EllipsoidFit> {
    let (center, cov, _) = planar_moments(e)?;
    // Principal axes of the covariance; a uniform ellipse with semi-axes (a, b) has covariance diag(a^2, b^2)/4.
    let tr = cov[0][0] + cov[1][1];
    let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
    let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
    let (l1, l2) = (0.5 * tr + disc, (0.5 * tr - disc).max(1e-300));
    let angle = if cov[0][1].abs() < 1e-300 && cov[0][0] >= cov[1][1] {
        0.0
    } else if cov[0][1].abs() < 1e-300 {
        0.5 * PI
    } else {
        (l1 - cov[0][0]).atan2(cov[0][1])
    };
    let shape0 = 0.5 * (l1 / l2).ln();
    let r0 = (m / PI).sqrt();
    let params_of = |x: &[f64]| EllipsoidParams {
        dim: 2,
        center: [x[0], x[1]],
        axes: [r0 * (0.5 * x[2]).exp(), r0 * (-0.5 * x[2]).exp()],
        angle: x[3],
    };
    let objective = |x: &[f64]| -ellipse_overlap(e, &params_of(x));
    let mut rng = ChaCha8Rng::seed_from_u64(MULTISTART_SEED);
    let mut starts = vec![vec![center[0], center[1], shape0, angle]];
    while starts.len() < ELLIPSE_STARTS {
        starts.push(vec![
            center[0] + 0.2 * r0 * (rng.random::<f64>() - 0.5),
            center[1] + 0.2 * r0 * (rng.random::<f64>() - 0.5),
            shape0 + rng.random_range(-0.5..0.5),
            rng.random_range(0.0..PI),
        ]);
    }
    let step = [0.05 * r0, 0.05 * r0, 0.1, 0.2];
    let results: Vec<_> = starts.par_iter().map(|x0| nelder_mead(objective, x0, &step, 1e-10, 3000)).collect();
    let best = results.iter().min_by(|a, b| a.value.total_cmp(&b.value)).expect("at least one start");
    let overlap = -best.value;
    let mut params = params_of(&best.x);
    params.angle = params.angle.rem_euclid(PI);
    Ok(EllipsoidFit {
        value: (2.0 * (m - overlap) / m).clamp(0.0, 2.0),
        params,
        exact: false,
        converged: best.converged,
    })
}

/// Best affine modulation `e^{i(alpha.x + b)}` found for a phase on `E`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineFit {
    /// Normalized distance `||e^{ig} - e^{iL}||_{L^2(E)} / |E|^{1/2}`; an upper bound on the infimum.
    pub value: f64,
    pub alpha: Point,
    pub b: f64,
    pub converged: bool,
}

struct PhaseData {
    dim: usize,
    nodes: Vec<Point>,
    weights: Vec<f64>,
    phase: Vec<f64>,
    mass: f64,
}

impl PhaseData {
    fn from_trial(t: &TrialFunction) -> Self {
        let grid = t.grid();
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        let mut phase = Vec::new();
        for k in 0..grid.len() {
            if grid.in_support[k] {
                nodes.push(grid.nodes[k]);
                weights.push(grid.weights[k]);
                phase.push(t.g()[k]);
            }
        }
        let mass = weights.iter().sum();
        PhaseData { dim: t.dim(), nodes, weights, phase, mass }
    }

    /// `int_E e^{i(g - 2 pi xi.x)} dx`.
    fn moment(&self, xi: &Point) -> Complex64 {
        let terms: Vec<Complex64> = self
            .nodes
            .iter()
            .zip(&self.weights)
            .zip(&self.phase)
            .map(|((x, w), g)| Complex64::from_polar(*w, g - 2.0 * PI * (x[0] * xi[0] + x[1] * xi[1])))
            .collect();
        crate::special::pairwise_sum_c(&terms)
    }

    /// Weighted least-squares slope of the phase.
    fn affine_slope(&self) -> Point {
        let d = self.dim;
        let n = d + 1;
        let mut a = vec![vec![0.0; n]; n];
        let mut rhs = vec![0.0; n];
        for ((x, w), g) in self.nodes.iter().zip(&self.weights).zip(&self.phase) {
            let basis: Vec<f64> = (0..d).map(|i| x[i]).chain(std::iter::once(1.0)).collect();
            for i in 0..n {
                rhs[i] += w * basis[i] * g;
                for j in 0..n {
                    a[i][j] += w * basis[i] * basis[j];
                }
            }
        }
        let m = nalgebra::DMatrix::from_fn(n, n, |i, j| a[i][j]);
        let v = nalgebra::DVector::from_vec(rhs);
        match m.lu().solve(&v) {
            Some(s) if s.iter().all(|x| x.is_finite()) => [s[0], if d == 2 { s[1] } else { 0.0 }],
            _ => [0.0, 0.0],
        }
    }

    fn width(&self) -> f64 {
        let mut w: f64 = 0.0;
        for axis in 0..self.dim {
            let lo = self.nodes.iter().map(|p| p[axis]).fold(f64::INFINITY, f64::min);
            let hi = self.nodes.iter().map(|p| p[axis]).fold(f64::NEG_INFINITY, f64::max);
            w = w.max(hi - lo);
        }
        w.max(1e-6)
    }
}

/// Distance from the phase factor of a trial to affine modulations on its support.
pub fn phase_distance(t: &TrialFunction) -> Result<AffineFit> {
    let data = PhaseData::from_trial(t);
    if !(data.mass > 0.0) {
        return Err(LabError::InvalidParameter("support has no quadrature nodes".into()));
    }
    let d = data.dim;
    let width = data.width();
    let slope = data.affine_slope();
    let center = [slope[0] / (2.0 * PI), slope[1] / (2.0 * PI)];
    let delta = 0.125 / width;
    let radius = (2.0 / width).max(1.0);
    let k = (radius / delta).ceil() as i64;
    let mut candidates: Vec<Point> = Vec::new();
    for c in [center, [0.0, 0.0]] {
        for j in if d == 2 { -k..=k } else { 0..=0 } {
            for i in -k..=k {
                candidates.push([c[0] + i as f64 * delta, c[1] + j as f64 * delta]);
            }
        }
        if center == [0.0, 0.0] {
            break;
        }
    }
    let scores: Vec<f64> = candidates.par_iter().map(|xi| data.moment(xi).norm()).collect();
    let (best_idx, _) =
        scores.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc });
    let start = candidates[best_idx];
    let x0: Vec<f64> = start[..d].to_vec();
    let step = vec![0.5 * delta; d];
    let min = nelder_mead(
        |x| {
            let xi = [x[0], if d == 2 { x[1] } else { 0.0 }];
            -data.moment(&xi).norm()
        },
        &x0,
        &step,
        1e-13,
        4000,
    );
    let xi = [min.x[0], if d == 2 { min.x[1] } else { 0.0 }];
    let z = data.moment(&xi);
    let sq = (2.0 - 2.0 * z.norm() / data.mass).max(0.0);
    Ok(AffineFit {
        value: sq.sqrt().min(2.0),
        alpha: [2.0 * PI * xi[0], 2.0 * PI * xi[1]],
        b: z.arg(),
        converged: min.converged,
    })
}

/// Distance from `e^{ig}` to affine modulations on `E`, sampled on the default grid.
pub fn dist_affine_modulation(g: Field, e: &SupportSet) -> Result<AffineFit> {
    let t = TrialFunction::from_fields(e.clone(), GridSpec::default_for(e.dim()), Arc::new(|_| 1.0), g)?;
    phase_distance(&t)
}

/// Which perturbation dominates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Case {
    Modulus,
    Support,
    Frequency,
}

impl fmt::Display for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Case::Modulus => "modulus",
            Case::Support => "support",
            Case::Frequency => "frequency",
        })
    }
}

/// Case label with the magnitudes it was decided from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaseLabel {
    pub case: Case,
    pub m: f64,
    pub n: f64,
    /// `||f - 1||_{L^1(E)}^{1/2}`.
    pub modulus_term: f64,
    /// `M N |E Delta B|`.
    pub support_term: f64,
    /// `N ||g||_{L^2(E)}`.
    pub frequency_term: f64,
}

/// Default thresholds `M = N = 10`.
pub const DEFAULT_M: f64 = 10.0;
pub const DEFAULT_N: f64 = 10.0;

/// Classify a trial by its dominant perturbation; ties resolve as Modulus, Support, Frequency.
pub fn case_classify(t: &TrialFunction, m: f64, n: f64) -> Result<CaseLabel> {
    if !(m > 0.0 && n > 0.0) {
        return Err(LabError::InvalidParameter("thresholds must be positive".into()));
    }
    let grid = t.grid();
    let (mut l1, mut g2) = (0.0, 0.0);
    for k in 0..grid.len() {
        if grid.in_support[k] {
            l1 += grid.weights[k] * (1.0 - t.f()[k]).abs();
            g2 += grid.weights[k] * t.g()[k] * t.g()[k];
        }
    }
    let modulus_term = l1.sqrt();
    let support_term = m * n * t.support().sym_diff_ball();
    let frequency_term = n * g2.sqrt();
    let case = if modulus_term >= support_term.max(frequency_term) {
        Case::Modulus
    } else if support_term >= frequency_term.max(modulus_term) {
        Case::Support
    } else {
        Case::Frequency
    };
    Ok(CaseLabel { case, m, n, modulus_term, support_term, frequency_term })
}

/// Deficit report after moving the best ellipsoid to the ball and removing the best affine phase.
pub fn stability_certificate(t: &TrialFunction, q: f64) -> Result<DeficitReport> {
    stability_certificate_with(t, q, crate::functional::default_tolerance(t.dim()))
}

pub fn stability_certificate_with(t: &TrialFunction, q: f64, tol: f64) -> Result<DeficitReport> {
    let (u, _) = volume_normalize(t)?;
    let spec = u.spec().clone();
    let fit = dist_ellipsoids(u.support())?;
    let mut flags = Vec::new();
    // Pull back by the ellipsoid map so the best ellipsoid becomes the unit ball.
    let a = fit.params.linear();
    let pulled = match u.pullback(&a, &fit.params.center).and_then(|p| p.resample(spec.clone())) {
        Ok(p) => p,
        Err(e) => {
            flags.push(format!("affine normalization skipped: {e}"));
            u.clone()
        }
    };
    let phase = phase_distance(&pulled)?;
    let (alpha, b) = (phase.alpha, phase.b);
    let g = pulled.phase_field();
    let reduced: Field = Arc::new(move |x: &Point| g(x) - alpha[0] * x[0] - alpha[1] * x[1] - b);
    let normalized = pulled.with_phase(reduced)?;
    let mut report = deficit_with(&normalized, q, tol)?;
    report.optimizer_flags.extend(flags);
    Ok(report)
}

/// Perturbation families for the exponent-optimality sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    /// `f = 1 - eta` on the ball.
    Modulus,
    /// `g = t |x|^2` on the ball.
    Phase,
    /// `g = t x_1` on the ball: exact extremizers, a degenerate control.
    PhaseAffine,
    /// Volume-preserving support perturbations.
    Support,
}

impl Family {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "modulus" | "modulus-eta" => Some(Family::Modulus),
            "phase" | "phase-t" => Some(Family::Phase),
            "phase-affine" => Some(Family::PhaseAffine),
            "support" => Some(Family::Support),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Family::Modulus => "modulus-eta",
            Family::Phase => "phase-t",
            Family::PhaseAffine => "phase-affine",
            Family::Support => "support",
        }
    }

    /// Expected exponent of the deficit against the family's distance term.
    pub fn expected_slope(&self) -> f64 {
        match self {
            Family::Modulus => 1.0,
            _ => 2.0,
        }
    }
}

/// Member of a family at parameter `s`.
pub fn family_member(family: Family, d: usize, s: f64) -> Result<TrialFunction> {
    let ball = SupportSet::unit_ball(d);
    let spec = GridSpec::default_for(d);
    match family {
        Family::Modulus => TrialFunction::new(ball, spec, move |_| 1.0 - s, |_| 0.0),
        Family::Phase => TrialFunction::new(ball, spec, |_| 1.0, move |x| s * (x[0] * x[0] + x[1] * x[1])),
        Family::PhaseAffine => TrialFunction::new(ball, spec, |_| 1.0, move |x| s * x[0]),
        Family::Support => TrialFunction::indicator_with(support_member(d, s)?, spec),
    }
}

/// `[-1, 1 - s] u [1, 1 + s]` in dimension one; `rho = c (1 + s cos 2 theta)` with area `pi` in the plane.
pub fn support_member(d: usize, s: f64) -> Result<SupportSet> {
    match d {
        1 => SupportSet::intervals(vec![(-1.0, 1.0 - s), (1.0, 1.0 + s)]),
        2 => {
            // Area of 1 + s cos(2 theta) is pi (1 + s^2/2).
            let c = 1.0 / (1.0 + 0.5 * s * s).sqrt();
            Ok(SupportSet::star(StarSet::new(move |t| c * (1.0 + s * (2.0 * t).cos()))?))
        }
        _ => Err(LabError::UnsupportedDimension(d)),
    }
}

/// One sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub parameter: f64,
    /// Distance term the deficit is fitted against.
    pub distance: f64,
    pub report: DeficitReport,
}

/// Sweep outcome with the log-log fit over points above the noise floor.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub family: Family,
    pub q: f64,
    pub d: usize,
    pub rows: Vec<SweepRow>,
    pub fit: Option<LineFit>,
    /// Points whose deficit interval contains zero.
    pub below_noise_floor: usize,
    pub degenerate: bool,
}

impl SweepResult {
    pub fn slope(&self) -> Option<f64> {
        self.fit.as_ref().map(|f| f.slope)
    }

    pub fn csv(&self) -> String {
        let mut out = String::from(
            "parameter,distance,deficit,budget,modulus_l1,phase_distance_sq,support_distance_sq,implied_constant\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                fmt12(r.parameter),
                fmt12(r.distance),
                fmt12(r.report.deficit),
                fmt12(r.report.budget),
                fmt12(r.report.modulus_l1),
                fmt12(r.report.phase_distance_sq),
                fmt12(r.report.support_distance_sq),
                r.report.implied_constant.map_or(String::new(), fmt12),
            ));
        }
        out
    }

    pub fn report(&self) -> String {
        let mut out = format!(
            "sweep {} q={} d={}\n  points            {}\n  below noise floor {}\n",
            self.family.name(),
            fmt12(self.q),
            self.d,
            self.rows.len(),
            self.below_noise_floor
        );
        match &self.fit {
            Some(f) => out.push_str(&format!(
                "  fitted slope      {} +- {} (95%), expected {}\n  r^2               {}\n",
                fmt12(f.slope),
                fmt12(f.slope_ci95),
                fmt12(self.family.expected_slope()),
                fmt12(f.r_squared)
            )),
            None => out.push_str("  fitted slope      rejected (fewer than three points above the noise floor)\n"),
        }
        if self.degenerate {
            out.push_str("  family is degenerate: deficits at the noise floor\n");
        }
        out
    }
}

/// Sweep tolerance: tighter than the single-evaluation default so small deficits resolve,
/// and still reachable below the resolvable frequency of the default grids.
pub fn sweep_tolerance(d: usize) -> f64 {
    if d == 1 {
        1e-7
    } else {
        1e-5
    }
}

/// Default parameter list of a family: geometric, inside `(0, 0.2]`, and in the range
/// where the leading-order scaling dominates while deficits stay well above the budget.
pub fn default_parameters(family: Family, d: usize) -> Vec<f64> {
    match (family, d) {
        (Family::Modulus, _) => geometric_ratio(0.00125, 2.0, 5),
        (Family::Support, 1) => geometric_ratio(0.0125, 2f64.sqrt(), 7),
        (Family::Support, _) => geometric_ratio(0.05, 2f64.powf(0.25), 5),
        _ => geometric_ratio(0.0125, 2.0, 5),
    }
}

pub(crate) fn check_parameters(params: &[f64]) -> Result<()> {
    if params.len() < 5 {
        return Err(LabError::InvalidParameter("a sweep needs at least five parameters".into()));
    }
    if params.iter().any(|p| !(*p > 0.0 && *p <= 0.2)) {
        return Err(LabError::InvalidParameter("sweep parameters must lie in (0, 0.2]".into()));
    }
    let ratios: Vec<f64> = params.windows(2).map(|w| w[1] / w[0]).collect();
    if ratios.iter().any(|r| !(*r > 1.0) || (r - ratios[0]).abs() > 1e-9 * ratios[0]) {
        return Err(LabError::InvalidParameter("sweep parameters must be increasing and geometric".into()));
    }
    Ok(())
}

/// Fit `log deficit` against `log distance` over a family.
pub fn optimality_sweep(family: Family, q: f64, d: usize, params: &[f64]) -> Result<SweepResult> {
    check_parameters(params)?;
    let tol = sweep_tolerance(d);
    let rows: Vec<Result<SweepRow>> = params
        .par_iter()
        .map(|&s| {
            let t = family_member(family, d, s)?;
            let report = deficit_with(&t, q, tol)?;
            let distance = match family {
                Family::Modulus => report.modulus_l1,
                Family::Phase | Family::PhaseAffine => report.phase_distance_sq.sqrt(),
                Family::Support => report.support_distance_sq.sqrt(),
            };
            Ok(SweepRow { parameter: s, distance, report })
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let above: Vec<&SweepRow> =
        rows.iter().filter(|r| r.report.deficit > r.report.budget && r.distance > 0.0).collect();
    let below_noise_floor = rows.len() - above.len();
    let fit = if above.len() >= 3 {
        let x: Vec<f64> = above.iter().map(|r| r.distance).collect();
        let y: Vec<f64> = above.iter().map(|r| r.report.deficit).collect();
        Some(loglog_fit(&x, &y)?)
    } else {
        None
    };
    let degenerate = above.is_empty();
    Ok(SweepResult { family, q, d, rows, fit, below_noise_floor, degenerate })
}

/// Quadratic stability of the support functional: deficit of `1_E` against `dist(E, ellipsoids)`.
pub fn support_sweep(q: f64, d: usize, sizes: &[f64]) -> Result<SweepResult> {
    optimality_sweep(Family::Support, q, d, sizes)
}

/// Geometric parameter list `start * 2^k`, `k < count`.
pub fn geometric(start: f64, count: usize) -> Vec<f64> {
    geometric_ratio(start, 2.0, count)
}

/// Geometric parameter list `start * ratio^k`, `k < count`.
pub fn geometric_ratio(start: f64, ratio: f64, count: usize) -> Vec<f64> {
    (0..count).map(|k| start * ratio.powi(k as i32)).collect()
}

/// Volume-preserving check used by tests and the CLI: `|E| = |B|` up to `tol`.
pub fn is_volume_matched(e: &SupportSet, tol: f64) -> bool {
    (e.measure() - ball_volume(e.dim())).abs() <= tol
}

/// One randomized perturbation of the ball in the sign suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SignTrial {
    /// Perturbation type that generated the trial.
    pub kind: Case,
    /// Perturbation size.
    pub epsilon: f64,
    /// Case label of the generated trial with the default thresholds.
    pub label: CaseLabel,
    pub report: DeficitReport,
}

/// Randomized stability-sign experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct SignSuite {
    pub q: f64,
    pub d: usize,
    pub seed: u64,
    pub trials: Vec<SignTrial>,
}

impl SignSuite {
    /// Trials with `deficit < -budget`.
    pub fn violations(&self) -> usize {
        self.trials.iter().filter(|t| t.report.deficit < -t.report.budget).count()
    }

    /// Trials whose certified deficit sign is positive.
    pub fn certified_positive(&self) -> usize {
        self.trials.iter().filter(|t| t.report.certified_sign() == Some(1.0)).count()
    }

    /// Certified trials whose implied constant is missing or not positive.
    pub fn nonpositive_constants(&self) -> usize {
        self.trials
            .iter()
            .filter(|t| t.report.certified_sign().is_some() && !t.report.implied_constant.is_some_and(|c| c > 0.0))
            .count()
    }

    pub fn csv(&self) -> String {
        let mut out = format!("trial,kind,epsilon,case,{}\n", DeficitReport::csv_header());
        for (k, t) in self.trials.iter().enumerate() {
            out.push_str(&format!("{},{},{},{},{}\n", k, t.kind, fmt12(t.epsilon), t.label.case, t.report.csv_row()));
        }
        out
    }

    pub fn report(&self) -> String {
        let min_c = self
            .trials
            .iter()
            .filter(|t| t.report.certified_sign().is_some())
            .filter_map(|t| t.report.implied_constant)
            .fold(f64::INFINITY, f64::min);
        format!(
            "sign suite q={} d={} seed={}\n  trials              {}\n  violations          {}\n  certified positive  {}\n  non-positive c      {}\n  smallest certified c {}\n",
            fmt12(self.q),
            self.d,
            self.seed,
            self.trials.len(),
            self.violations(),
            self.certified_positive(),
            self.nonpositive_constants(),
            if min_c.is_finite() { fmt12(min_c) } else { "none".into() }
        )
    }
}

/// Draws for one trial, taken sequentially so the suite is independent of scheduling.
#[derive(Debug, Clone, Copy)]
struct TrialDraw {
    kind: Case,
    epsilon: f64,
    freq: f64,
    phase: f64,
    mix: [f64; 3],
    offset: f64,
}

fn draw_trial(rng: &mut ChaCha8Rng, k: usize, eps_max: f64) -> TrialDraw {
    let kind = [Case::Modulus, Case::Support, Case::Frequency][k % 3];
    TrialDraw {
        kind,
        epsilon: rng.random_range(0.1 * eps_max..=eps_max),
        freq: rng.random_range(1.0..6.0),
        phase: rng.random_range(0.0..2.0 * PI),
        mix: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
        offset: rng.random_range(0.0..0.5),
    }
}

fn build_trial(draw: &TrialDraw, d: usize) -> Result<TrialFunction> {
    let TrialDraw { epsilon: e, freq: w, phase: p, mix: a, offset, .. } = *draw;
    let spec = GridSpec::default_for(d);
    let ball = SupportSet::unit_ball(d);
    match draw.kind {
        Case::Modulus => TrialFunction::new(
            ball,
            spec,
            move |x| 1.0 - e * (0.5 + 0.5 * (w * (x[0] + a[0] * x[1]) + p).sin()),
            |_| 0.0,
        ),
        Case::Frequency => TrialFunction::new(
            ball,
            spec,
            |_| 1.0,
            move |x| {
                let r2 = x[0] * x[0] + x[1] * x[1];
                e * (r2 + a[0] * x[0] * r2 + a[1] * (w * x[0] + p).sin() + a[2] * x[0] * x[1])
            },
        ),
        Case::Support => {
            let support = match d {
                // Move a sliver of length e from the right end to a gap of width `offset`.
                1 => SupportSet::intervals(vec![(-1.0, 1.0 - e), (1.0 + offset, 1.0 + offset + e)])?,
                2 => {
                    let m = 3.0 + (w.floor() % 3.0);
                    SupportSet::star(StarSet::new(move |t| 1.0 + e * (m * t + p).cos())?)
                }
                _ => return Err(LabError::UnsupportedDimension(d)),
            };
            TrialFunction::indicator_with(support, spec)
        }
    }
}

/// `trials` random perturbations of size at most `eps_max`, cycling through the three cases.
pub fn sign_suite(q: f64, d: usize, trials: usize, eps_max: f64, seed: u64) -> Result<SignSuite> {
    if trials == 0 {
        return Err(LabError::InvalidParameter("the sign suite needs at least one trial".into()));
    }
    if !(eps_max > 0.0 && eps_max <= 0.2) {
        return Err(LabError::InvalidParameter(format!("perturbation size must lie in (0, 0.2], got {eps_max}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<TrialDraw> = (0..trials).map(|k| draw_trial(&mut rng, k, eps_max)).collect();
    let results: Vec<Result<SignTrial>> = draws
        .par_iter()
        .map(|draw| {
            let t = build_trial(draw, d)?;
            let label = case_classify(&t, DEFAULT_M, DEFAULT_N)?;
            let report = stability_certificate(&t, q)?;
            Ok(SignTrial { kind: draw.kind, epsilon: draw.epsilon, label, report })
        })
        .collect();
    Ok(SignSuite { q, d, seed, trials: results.into_iter().collect::<Result<Vec<_>>>()? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::gauss_legendre;

    #[test]
    fn interval_distances() {
        let f = dist_ellipsoids(&SupportSet::unit_ball(1)).unwrap();
        assert_eq!(f.value, 0.0);
        assert_eq!(f.params.center[0], 0.0);
        let e = SupportSet::intervals(vec![(-1.0, 0.0), (0.5, 1.5)]).unwrap();
        let f = dist_ellipsoids(&e).unwrap();
        assert!((f.value - 0.5).abs() < 1e-14, "{f:?}");
        // Exhaustive center sweep as an independent check.
        let best = (0..=40000)
            .map(|k| -2.0 + k as f64 * 1e-4)
            .map(|c| 4.0 - 2.0 * interval_overlap(&[(-1.0, 0.0), (0.5, 1.5)], c - 1.0, c + 1.0))
            .fold(f64::INFINITY, f64::min);
        assert!((best / 2.0 - f.value).abs() < 1e-9);
    }

    #[test]
    fn ellipse_is_its_own_best_fit() {
        let e = SupportSet::star(
            StarSet::disk(1.0).unwrap().with_frame([0.0, 0.0], [[1.1, 0.0], [0.0, 1.0 / 1.1]]).unwrap(),
        );
        let f = dist_ellipsoids(&e).unwrap();
        assert!(f.value < 1e-6, "{f:?}");
        assert!((f.params.volume() - PI).abs() < 1e-9);
        let rotated = SupportSet::star(
            StarSet::disk(1.0)
                .unwrap()
                .with_frame(
                    [0.3, -0.2],
                    EllipsoidParams { dim: 2, center: [0.0; 2], axes: [1.3, 0.7], angle: 0.4 }.linear(),
                )
                .unwrap(),
        );
        let f = dist_ellipsoids(&rotated).unwrap();
        assert!(f.value < 1e-6, "{f:?}");
    }

    #[test]
    fn affine_phase_has_zero_distance() {
        let e = SupportSet::unit_ball(1);
        let f = dist_affine_modulation(Arc::new(|x: &Point| 7.0 * x[0] + 2.0), &e).unwrap();
        assert!(f.value < 1e-6, "{f:?}");
        assert!((f.alpha[0] - 7.0).abs() < 1e-5);
        assert!((f.b - 2.0).abs() < 1e-5);
        let f = dist_affine_modulation(Arc::new(|_: &Point| 0.0), &e).unwrap();
        assert!(f.value < 1e-6 && f.alpha[0].abs() < 1e-6 && f.b.abs() < 1e-9);
    }

    #[test]
    fn quadratic_phase_matches_brute_force() {
        let e = SupportSet::unit_ball(1);
        let fit = dist_affine_modulation(Arc::new(|x: &Point| x[0] * x[0]), &e).unwrap();
        // Brute force over (alpha, b) with a 64-point Gauss rule on [-1, 1].
        let rule = gauss_legendre(64);
        let nodes: Vec<(f64, f64)> = rule.on(-1.0, 1.0).collect();
        let dist = |alpha: f64, b: f64| -> f64 {
            let s: f64 = nodes
                .iter()
                .map(|&(x, w)| {
                    w * (Complex64::from_polar(1.0, x * x) - Complex64::from_polar(1.0, alpha * x + b)).norm_sqr()
                })
                .sum();
            (s / 2.0).sqrt()
        };
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..=200 {
            for j in 0..=628 {
                let (a, b) = (-2.0 + 0.02 * i as f64, -PI + 0.01 * j as f64);
                let v = dist(a, b);
                if v < best.0 {
                    best = (v, a, b);
                }
            }
        }
        let (mut a0, mut b0, mut h) = (best.1, best.2, 0.01);
        for _ in 0..6 {
            for i in -20..=20 {
                for j in -20..=20 {
                    let (a, b) = (a0 + h * i as f64 * 0.1, b0 + h * j as f64 * 0.1);
                    let v = dist(a, b);
                    if v < best.0 {
                        best = (v, a, b);
                    }
                }
            }
            a0 = best.1;
            b0 = best.2;
            h *= 0.2;
        }
        assert!((fit.value - best.0).abs() < 1e-4, "{} vs {}", fit.value, best.0);
        assert!(fit.value <= 2.0 && fit.value >= 0.0);
    }

    #[test]
    fn case_examples() {
        let b = SupportSet::unit_ball(1);
        let spec = GridSpec::default_for(1);
        let t = TrialFunction::new(b.clone(), spec.clone(), |_| 0.5, |_| 0.0).unwrap();
        assert_eq!(case_classify(&t, 3.0, 7.0).unwrap().case, Case::Modulus);
        let e = SupportSet::interval(-1.0, 1.2).unwrap();
        let t = volume_normalize(&TrialFunction::indicator(e).unwrap()).unwrap().0;
        assert_eq!(case_classify(&t, 1.0, 1.0).unwrap().case, Case::Support);
        let t = TrialFunction::new(b, spec, |_| 1.0, |x| 0.1 * x[0]).unwrap();
        assert_eq!(case_classify(&t, 10.0, 10.0).unwrap().case, Case::Frequency);
    }

    #[test]
    fn extremizer_certificate_is_zero() {
        let e = SupportSet::interval(0.3, 2.3).unwrap();
        let t = TrialFunction::new(e, GridSpec::default_for(1), |_| 1.0, |x| 3.0 * x[0] - 1.0).unwrap();
        let r = stability_certificate(&t, 4.0).unwrap();
        assert!(r.deficit.abs() <= r.budget, "{r:?}");
        assert!(r.support_distance_sq < 1e-20);
        assert!(r.phase_distance_sq < 1e-10);
        assert!(r.modulus_l1 == 0.0);
    }

    #[test]
    fn sweep_parameter_validation() {
        assert!(check_parameters(&geometric(0.0125, 5)).is_ok());
        assert!(check_parameters(&geometric(0.0125, 4)).is_err());
        assert!(check_parameters(&geometric(0.05, 5)).is_err());
        assert!(check_parameters(&[0.01, 0.02, 0.03, 0.04, 0.05]).is_err());
    }

    #[test]
    fn translated_intervals_have_zero_deficit() {
        for s in [0.05, 0.1] {
            let t = TrialFunction::indicator(SupportSet::interval(-1.0 - s, 1.0 - s).unwrap()).unwrap();
            let r = deficit_with(&t, 4.0, 1e-8).unwrap();
            assert!(r.deficit.abs() <= r.budget, "{r:?}");
        }
    }
}
