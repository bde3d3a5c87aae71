//! Discretized second-variation operator on the unit ball.
//!
//! `T h = K^{-1/2} ((K^{-1/2} h 1_B) * L)` restricted to `B`, discretized by a Nystrom rule
//! and stored in the symmetric form `S = W^{1/2} T W^{-1/2}`. Because `K` and `L` are even,
//! `S` commutes with the grid reflection, so the spectrum is computed in separate even and
//! odd blocks and every eigenvector has an exact parity.

use crate::error::{LabError, Result};
use crate::kernels::{kernel_K, kernel_L, Kernel, RadialGrid};
use crate::report::fmt12;
use crate::special::gauss_legendre;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use std::f64::consts::PI;

/// Angular nodes of the d=2 polar grid; resolves angular modes up to 16.
pub const ANGULAR_NODES: usize = 32;
/// Default d=1 grid size (midpoint cells on `[-1, 1]`).
pub const DEFAULT_N_1D: usize = 512;
/// Default d=2 radial node count.
pub const DEFAULT_N_2D: usize = 24;
/// Parity score tolerance: `|<y, Ry>|` must be within this of 1.
pub const PARITY_TOLERANCE: f64 = 1e-8;

/// Quadrature grid over the unit ball, symmetric under `x -> -x`.
#[derive(Debug, Clone)]
pub struct BallGrid {
    pub d: usize,
    pub nodes: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
    /// Index of the mirrored node.
    pub reflection: Vec<usize>,
    /// Resolution parameter: cells in d=1, radial nodes in d=2.
    pub n: usize,
}

impl BallGrid {
    /// Midpoint cells on `[-1, 1]` (d=1, `n` even) or a Gauss-radial polar grid (d=2).
    pub fn new(d: usize, n: usize) -> Result<Self> {
        match d {
            1 => {
                if n < 2 || !n.is_multiple_of(2) {
                    return Err(LabError::InvalidParameter(format!("d=1 grid needs an even cell count, got {n}")));
                }
                let h = 2.0 / n as f64;
                let mut nodes = vec![[0.0; 2]; n];
                for i in 0..n / 2 {
                    let x = -1.0 + (i as f64 + 0.5) * h;
                    nodes[i] = [x, 0.0];
                    nodes[n - 1 - i] = [-x, 0.0];
                }
                let reflection = (0..n).map(|i| n - 1 - i).collect();
                Ok(BallGrid { d, nodes, weights: vec![h; n], reflection, n })
            }
            2 => {
                if n < 1 {
                    return Err(LabError::InvalidParameter("d=2 grid needs at least one radial node".into()));
                }
                let m = ANGULAR_NODES;
                let dtheta = 2.0 * PI / m as f64;
                let rule = gauss_legendre(n);
                let mut nodes = Vec::with_capacity(n * m);
                let mut weights = Vec::with_capacity(n * m);
                let mut reflection = Vec::with_capacity(n * m);
                for (a, (r, wr)) in rule.on(0.0, 1.0).enumerate() {
                    let base = a * m;
                    let mut ring = vec![[0.0; 2]; m];
                    for j in 0..m / 2 {
                        let th = (j as f64 + 0.5) * dtheta;
                        let p = [r * th.cos(), r * th.sin()];
                        ring[j] = p;
                        ring[j + m / 2] = [-p[0], -p[1]];
                    }
                    for (j, p) in ring.iter().enumerate() {
                        nodes.push(*p);
                        weights.push(r * wr * dtheta);
                        reflection.push(base + (j + m / 2) % m);
                    }
                }
                Ok(BallGrid { d, nodes, weights, reflection, n })
            }
            _ => Err(LabError::UnsupportedDimension(d)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Weighted inner product of two grid functions.
    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).zip(&self.weights).map(|((x, y), w)| x * y * w).sum()
    }

    pub fn norm_sq(&self, a: &[f64]) -> f64 {
        self.inner(a, a)
    }

    /// `h(-x)` as a grid function.
    pub fn reflect(&self, h: &[f64]) -> Vec<f64> {
        self.reflection.iter().map(|&j| h[j]).collect()
    }

    /// Sample a function of the point.
    pub fn sample(&self, f: impl Fn(&[f64; 2]) -> f64) -> Vec<f64> {
        self.nodes.iter().map(f).collect()
    }

    /// Representatives `i < R(i)` of the mirror pairs.
    fn pairs(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| i < self.reflection[i]).collect()
    }
}

/// Symmetrized discretization of `T_q`.
#[derive(Debug, Clone)]
pub struct OperatorT {
    pub q: f64,
    pub d: usize,
    pub grid: BallGrid,
    /// `K_q` at the grid nodes.
    pub k_values: Vec<f64>,
    /// `S[i][j] = sqrt(w_i) K(x_i)^{-1/2} L(x_i - x_j) K(x_j)^{-1/2} sqrt(w_j)`.
    pub s: DMatrix<f64>,
    /// `sup_B K^{-1} * ||L||_{L1(2B)}`: bound for the operator norm.
    pub norm_bound: f64,
    /// Interpolation and truncation error carried by the two kernels.
    pub kernel_error: f64,
}

/// Assemble `S` for exponent `q` on the given grid.
#[allow(non_snake_case)]
pub fn build_T(q: f64, d: usize, grid: BallGrid) -> Result<OperatorT> {
    if grid.d != d {
        return Err(LabError::InvalidParameter(format!("grid dimension {} does not match d={d}", grid.d)));
    }
    if grid.pairs().len() * 2 != grid.len() {
        return Err(LabError::InvalidParameter("grid has nodes fixed by the reflection".into()));
    }
    let radial = RadialGrid::default_for(q);
    let kk = kernel_K(q, d, radial)?;
    let ll = kernel_L(q, d, radial)?;
    let k_values = grid.sample(|x| kk.at(x));
    let k_min = k_values.iter().copied().fold(f64::INFINITY, f64::min);
    if !(k_min > 0.0) {
        return Err(LabError::NonPositiveKernel { q, min: k_min });
    }
    let scale: Vec<f64> = grid.weights.iter().zip(&k_values).map(|(w, k)| (w / k).sqrt()).collect();
    let n = grid.len();
    let mut data = vec![0.0; n * n];
    data.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let xi = grid.nodes[i];
        for (j, out) in row.iter_mut().enumerate() {
            let xj = grid.nodes[j];
            *out = scale[i] * ll.at(&[xi[0] - xj[0], xi[1] - xj[1]]) * scale[j];
        }
    });
    let s = DMatrix::from_row_slice(n, n, &data);
    let norm_bound = l1_on_double_ball(&ll, d) / k_min;
    Ok(OperatorT { q, d, grid, k_values, s, norm_bound, kernel_error: kk.error_bound() + ll.error_bound() })
}

/// `T_q` on the default grid of resolution `n`.
#[allow(non_snake_case)]
pub fn build_T_n(q: f64, d: usize, n: usize) -> Result<OperatorT> {
    build_T(q, d, BallGrid::new(d, n)?)
}

/// `int_{|x| <= 2} |L(x)| dx` by the trapezoid rule on the radial profile.
fn l1_on_double_ball(l: &Kernel, d: usize) -> f64 {
    let m = 4000;
    let h = 2.0 / m as f64;
    let measure = |r: f64| if d == 1 { 2.0 } else { 2.0 * PI * r };
    (0..=m)
        .map(|k| {
            let r = k as f64 * h;
            let w = if k == 0 || k == m { 0.5 } else { 1.0 };
            w * h * l.value(r).abs() * measure(r)
        })
        .sum()
}

impl OperatorT {
    fn grid_to_y(&self, h: &[f64]) -> DVector<f64> {
        DVector::from_iterator(h.len(), h.iter().zip(&self.grid.weights).map(|(v, w)| v * w.sqrt()))
    }

    fn y_to_grid(&self, y: &DVector<f64>) -> Vec<f64> {
        y.iter().zip(&self.grid.weights).map(|(v, w)| v / w.sqrt()).collect()
    }

    /// `T h` as a grid function.
    pub fn apply(&self, h: &[f64]) -> Vec<f64> {
        self.y_to_grid(&(&self.s * self.grid_to_y(h)))
    }

    /// `Q_q(f, h) = <f, T h>` in the weighted inner product.
    pub fn pairing(&self, f: &[f64], h: &[f64]) -> f64 {
        self.grid_to_y(f).dot(&(&self.s * self.grid_to_y(h)))
    }

    /// `||S - S^T|| / ||S||` (Frobenius).
    pub fn asymmetry(&self) -> f64 {
        (&self.s - self.s.transpose()).norm() / self.s.norm()
    }

    /// `||S R - R S|| / ||S||` with `R` the grid reflection.
    pub fn reflection_commutator(&self) -> f64 {
        let r = &self.grid.reflection;
        let n = self.grid.len();
        let mut sum = 0.0;
        for i in 0..n {
            for j in 0..n {
                let d = self.s[(i, r[j])] - self.s[(r[i], j)];
                sum += d * d;
            }
        }
        sum.sqrt() / self.s.norm()
    }

    /// Even (`sign = 1`) or odd (`sign = -1`) block in the orthonormal mirror-pair basis.
    fn block(&self, sign: f64) -> DMatrix<f64> {
        let pairs = self.grid.pairs();
        let r = &self.grid.reflection;
        let m = pairs.len();
        DMatrix::from_fn(m, m, |a, b| {
            let (i, j) = (pairs[a], pairs[b]);
            let (ri, rj) = (r[i], r[j]);
            0.5 * (self.s[(i, j)] + sign * self.s[(i, rj)] + sign * self.s[(ri, j)] + self.s[(ri, rj)])
        })
    }

    /// Lift block coordinates back to the full grid (`y` coordinates).
    fn lift(&self, v: &DVector<f64>, sign: f64) -> DVector<f64> {
        let pairs = self.grid.pairs();
        let mut y = DVector::zeros(self.grid.len());
        let c = std::f64::consts::FRAC_1_SQRT_2;
        for (a, &i) in pairs.iter().enumerate() {
            y[i] = c * v[a];
            y[self.grid.reflection[i]] = sign * c * v[a];
        }
        y
    }

    /// Restrict full-grid `y` coordinates to a parity block.
    fn restrict(&self, y: &DVector<f64>, sign: f64) -> DVector<f64> {
        let pairs = self.grid.pairs();
        let c = std::f64::consts::FRAC_1_SQRT_2;
        DVector::from_iterator(pairs.len(), pairs.iter().map(|&i| c * (y[i] + sign * y[self.grid.reflection[i]])))
    }
}

/// Second-variation form `Phi(h) = -(q/2)||h||^2 - q(q-2)/4 Q(h, h~) + q^2/4 Q(h, h)`.
pub fn qform(t: &OperatorT, h: &[f64]) -> f64 {
    let q = t.q;
    let reflected = t.grid.reflect(h);
    -0.5 * q * t.grid.norm_sq(h) - 0.25 * q * (q - 2.0) * t.pairing(h, &reflected) + 0.25 * q * q * t.pairing(h, h)
}

/// Parity of an eigenvector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parity {
    Even,
    Odd,
    Mixed,
}

impl Parity {
    pub fn name(&self) -> &'static str {
        match self {
            Parity::Even => "even",
            Parity::Odd => "odd",
            Parity::Mixed => "mixed",
        }
    }
}

/// One eigenpair of `T_q`.
#[derive(Debug, Clone)]
pub struct Eigenpair {
    pub value: f64,
    /// Eigenfunction on the grid, unit weighted norm.
    pub vector: Vec<f64>,
    pub parity: Parity,
    /// `<h, h~> / ||h||^2`.
    pub parity_score: f64,
    /// `||P_H h||^2 / ||h||^2`.
    pub h_overlap: f64,
}

/// Leading part of the spectrum.
#[derive(Debug, Clone)]
pub struct Eigensystem {
    pub q: f64,
    pub d: usize,
    pub n: usize,
    /// Sorted by decreasing `|value|`.
    pub pairs: Vec<Eigenpair>,
    /// Set when some eigenvector fails the parity tolerance.
    pub degenerate: bool,
}

impl Eigensystem {
    pub fn csv(&self) -> String {
        let mut out = String::from("index,eigenvalue,parity,h_overlap\n");
        for (k, p) in self.pairs.iter().enumerate() {
            out.push_str(&format!("{},{},{},{}\n", k + 1, fmt12(p.value), p.parity.name(), fmt12(p.h_overlap)));
        }
        out
    }

    /// Number of leading eigenvalues with `|lambda| >= 1/(q-1)`.
    pub fn truncation_index(&self) -> usize {
        let threshold = 1.0 / (self.q - 1.0);
        self.pairs.iter().take_while(|p| p.value.abs() >= threshold).count()
    }
}

fn sorted_eigen(m: DMatrix<f64>) -> Vec<(f64, DVector<f64>)> {
    let eig = SymmetricEigen::new(m);
    let mut out: Vec<(f64, DVector<f64>)> =
        eig.eigenvalues.iter().enumerate().map(|(k, &v)| (v, eig.eigenvectors.column(k).into_owned())).collect();
    out.sort_by(|a, b| b.0.total_cmp(&a.0));
    out
}

/// The `k` largest-magnitude eigenpairs of `T`.
///
/// Each parity block is diagonalized on its own, so eigenvalues shared by an even and an odd
/// function never produce mixed eigenvectors.
pub fn eigensystem(t: &OperatorT, k: usize) -> Result<Eigensystem> {
    let sub = subspace_h(t)?;
    let mut all: Vec<(f64, DVector<f64>)> = Vec::with_capacity(t.grid.len());
    for sign in [1.0, -1.0] {
        for (value, v) in sorted_eigen(t.block(sign)) {
            all.push((value, t.lift(&v, sign)));
        }
    }
    all.sort_by(|a, b| b.0.abs().total_cmp(&a.0.abs()).then(b.0.total_cmp(&a.0)));
    let r = &t.grid.reflection;
    let mut degenerate = false;
    let pairs = all
        .into_iter()
        .take(k)
        .map(|(value, y)| {
            let score: f64 = (0..y.len()).map(|i| y[i] * y[r[i]]).sum::<f64>() / y.norm_squared();
            let parity = if score > 1.0 - PARITY_TOLERANCE {
                Parity::Even
            } else if score < -1.0 + PARITY_TOLERANCE {
                Parity::Odd
            } else {
                degenerate = true;
                Parity::Mixed
            };
            let h_overlap = sub.overlap(&y);
            let y = &y / y.norm();
            Eigenpair { value, vector: t.y_to_grid(&y), parity, parity_score: score, h_overlap }
        })
        .collect();
    Ok(Eigensystem { q: t.q, d: t.d, n: t.grid.n, pairs, degenerate })
}

/// Orthonormal basis of `span{K^{1/2}, K^{1/2} x_1, ..., K^{1/2} x_d}` on the grid.
#[derive(Debug, Clone)]
pub struct SubspaceH {
    /// Columns in `y` coordinates (`y = sqrt(w) h`), Euclidean-orthonormal.
    pub basis: DMatrix<f64>,
    /// Condition number of the Gram matrix of the raw spanning set.
    pub gram_condition: f64,
}

impl SubspaceH {
    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    /// `||Q^T Q - I||_max`.
    pub fn orthonormality_error(&self) -> f64 {
        let g = self.basis.transpose() * &self.basis;
        let n = g.nrows();
        (&g - DMatrix::identity(n, n)).amax()
    }

    fn overlap(&self, y: &DVector<f64>) -> f64 {
        (self.basis.transpose() * y).norm_squared() / y.norm_squared()
    }
}

/// Raw spanning set `K^{1/2}(x) * {1, x_1, ..., x_d}` as grid functions.
pub fn null_functions(t: &OperatorT) -> Vec<Vec<f64>> {
    let root: Vec<f64> = t.k_values.iter().map(|k| k.sqrt()).collect();
    let mut out = vec![root.clone()];
    for axis in 0..t.d {
        out.push(t.grid.nodes.iter().zip(&root).map(|(x, r)| r * x[axis]).collect());
    }
    out
}

/// Build the null subspace by Gram-matrix orthonormalization on the grid.
pub fn subspace_h(t: &OperatorT) -> Result<SubspaceH> {
    let raw = null_functions(t);
    let n = t.grid.len();
    let b = DMatrix::from_fn(n, raw.len(), |i, k| raw[k][i] * t.grid.weights[i].sqrt());
    let gram = b.transpose() * &b;
    let eig = SymmetricEigen::new(gram.clone());
    let (lo, hi) = eig.eigenvalues.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let chol =
        gram.cholesky().ok_or_else(|| LabError::Degenerate("Gram matrix of the null functions is singular".into()))?;
    // Q = B L^{-T}.
    let l_inv_t =
        chol.l().try_inverse().ok_or_else(|| LabError::Degenerate("Gram factor is singular".into()))?.transpose();
    Ok(SubspaceH { basis: b * l_inv_t, gram_condition: hi / lo })
}

/// Weighted-L2 projection onto the null subspace.
#[derive(Debug, Clone)]
pub struct Projection {
    pub component: Vec<f64>,
    pub residual: Vec<f64>,
    /// Coefficients in the orthonormal basis.
    pub coefficients: Vec<f64>,
    pub norm_sq: f64,
    pub component_norm_sq: f64,
    pub residual_norm_sq: f64,
}

#[allow(non_snake_case)]
pub fn project_H(t: &OperatorT, sub: &SubspaceH, h: &[f64]) -> Projection {
    let y = t.grid_to_y(h);
    let c = sub.basis.transpose() * &y;
    let py = &sub.basis * &c;
    let component = t.y_to_grid(&py);
    let residual: Vec<f64> = h.iter().zip(&component).map(|(a, b)| a - b).collect();
    Projection {
        norm_sq: t.grid.norm_sq(h),
        component_norm_sq: t.grid.norm_sq(&component),
        residual_norm_sq: t.grid.norm_sq(&residual),
        coefficients: c.iter().copied().collect(),
        component,
        residual,
    }
}

/// Gap of the form on one resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapLevel {
    pub n: usize,
    /// `-max Phi(h) / ||h||^2` over `h` orthogonal to the null subspace.
    pub c: f64,
    /// Same quantity from the eigenvalues of `T` (parity formula, null eigenvectors removed).
    pub eigen_c: f64,
    /// `max |Phi(b)|` over the orthonormal null basis.
    pub null_form: f64,
    /// Leading eigenvalues with `|lambda| >= 1/(q-1)`.
    pub truncation_index: usize,
    pub top_eigenvalue: f64,
}

/// Gap estimate with its refinement check.
#[derive(Debug, Clone, PartialEq)]
pub struct GapReport {
    pub q: f64,
    pub d: usize,
    pub coarse: GapLevel,
    pub fine: GapLevel,
    /// `|c_fine - c_coarse| / |c_fine|`.
    pub drift: f64,
    /// Set when either resolution gives `c <= 0`.
    pub falsified: bool,
}

impl GapReport {
    pub fn c(&self) -> f64 {
        self.fine.c
    }

    pub fn csv_header() -> &'static str {
        "q,d,n,c,eigen_c,null_form,truncation_index,top_eigenvalue"
    }

    pub fn csv(&self) -> String {
        let mut out = format!("{}\n", Self::csv_header());
        for l in [&self.coarse, &self.fine] {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                fmt12(self.q),
                self.d,
                l.n,
                fmt12(l.c),
                fmt12(l.eigen_c),
                fmt12(l.null_form),
                l.truncation_index,
                fmt12(l.top_eigenvalue)
            ));
        }
        out
    }

    pub fn report(&self) -> String {
        format!(
            "spectral gap q={} d={}: c={} at n={}, c={} at n={}, drift {:.3}%{}",
            fmt12(self.q),
            self.d,
            fmt12(self.coarse.c),
            self.coarse.n,
            fmt12(self.fine.c),
            self.fine.n,
            100.0 * self.drift,
            if self.falsified { ", FALSIFIED: c <= 0" } else { "" }
        )
    }
}

/// `Phi` restricted to one parity block: `-(q/2) I + a * block`.
fn form_block(t: &OperatorT, sign: f64) -> DMatrix<f64> {
    let q = t.q;
    // Q(h, h~) = sign * Q(h, h) on a block of parity `sign`.
    let a = 0.25 * q * q - sign * 0.25 * q * (q - 2.0);
    let mut m = t.block(sign) * a;
    for i in 0..m.nrows() {
        m[(i, i)] -= 0.5 * q;
    }
    m
}

/// Largest eigenvalue of `m` on the orthogonal complement of the columns of `basis`.
///
/// Deflates the excluded span to `-shift` so an ordinary symmetric solve suffices.
fn max_on_complement(m: &DMatrix<f64>, basis: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let p = basis * basis.transpose();
    let perp = DMatrix::identity(n, n) - &p;
    let shift = 1.0 + m.norm();
    let projected = &perp * m * &perp - p * shift;
    let projected = (&projected + projected.transpose()) * 0.5;
    SymmetricEigen::new(projected).eigenvalues.max()
}

/// Orthonormalized restriction of null functions of one parity to its block.
fn block_basis(t: &OperatorT, sub: &SubspaceH, sign: f64) -> DMatrix<f64> {
    let cols: Vec<DVector<f64>> = (0..sub.dim())
        .map(|k| t.restrict(&sub.basis.column(k).into_owned(), sign))
        .filter(|v| v.norm() > 1e-8)
        .collect();
    if cols.is_empty() {
        return DMatrix::zeros(t.grid.len() / 2, 0);
    }
    let b = DMatrix::from_columns(&cols);
    let qr = b.qr();
    qr.q()
}

/// Gap of the second-variation form at one resolution.
pub fn gap_level(t: &OperatorT) -> Result<GapLevel> {
    let q = t.q;
    let sub = subspace_h(t)?;
    let mut max_form = f64::NEG_INFINITY;
    for sign in [1.0, -1.0] {
        let m = form_block(t, sign);
        let basis = block_basis(t, &sub, sign);
        max_form = max_form.max(max_on_complement(&m, &basis));
    }
    let es = eigensystem(t, t.grid.len())?;
    // Drop the d+1 eigenvectors closest to the null subspace, then apply the parity formula.
    let mut by_overlap: Vec<usize> = (0..es.pairs.len()).collect();
    by_overlap.sort_by(|&a, &b| es.pairs[b].h_overlap.total_cmp(&es.pairs[a].h_overlap));
    let excluded = &by_overlap[..(t.d + 1).min(by_overlap.len())];
    let eigen_max = es
        .pairs
        .iter()
        .enumerate()
        .filter(|(k, _)| !excluded.contains(k))
        .map(|(_, p)| match p.parity {
            Parity::Odd => -0.5 * q + 0.5 * q * (q - 1.0) * p.value,
            _ => -0.5 * q + 0.5 * q * p.value,
        })
        .fold(f64::NEG_INFINITY, f64::max);
    let null_form =
        (0..sub.dim()).map(|k| qform(t, &t.y_to_grid(&sub.basis.column(k).into_owned())).abs()).fold(0.0, f64::max);
    Ok(GapLevel {
        n: t.grid.n,
        c: -max_form,
        eigen_c: -eigen_max,
        null_form,
        truncation_index: es.truncation_index(),
        top_eigenvalue: es.pairs.first().map_or(f64::NAN, |p| p.value),
    })
}

/// Default resolution for dimension `d`.
pub fn default_resolution(d: usize) -> usize {
    if d == 1 {
        DEFAULT_N_1D
    } else {
        DEFAULT_N_2D
    }
}

/// Gap estimate at the default resolution and its doubling.
pub fn gap_estimate(q: f64, d: usize) -> Result<GapReport> {
    gap_estimate_with(q, d, default_resolution(d))
}

/// Gap estimate at resolution `n` and `2n`.
pub fn gap_estimate_with(q: f64, d: usize, n: usize) -> Result<GapReport> {
    let coarse = gap_level(&build_T_n(q, d, n)?)?;
    let fine = gap_level(&build_T_n(q, d, 2 * n)?)?;
    let drift = (fine.c - coarse.c).abs() / fine.c.abs();
    Ok(GapReport { q, d, coarse, fine, drift, falsified: !(coarse.c > 0.0 && fine.c > 0.0) })
}

/// `Phi(h)` expanded in a complete eigenbasis; the sum does not depend on the pair order.
pub fn qform_eigen(es: &Eigensystem, grid: &BallGrid, h: &[f64]) -> f64 {
    let q = es.q;
    let quadratic: f64 = es
        .pairs
        .iter()
        .map(|p| {
            let c = grid.inner(h, &p.vector);
            let sign = if p.parity == Parity::Odd { -1.0 } else { 1.0 };
            p.value * c * c * (0.25 * q * q - sign * 0.25 * q * (q - 2.0))
        })
        .sum();
    -0.5 * q * grid.norm_sq(h) + quadratic
}
