//! Exact piecewise-polynomial arithmetic on the line.
//!
//! Iterated convolutions of interval indicators are piecewise polynomials, so
//! they are represented exactly (up to rounding) and convolved by differencing
//! antiderivatives: `(phi * 1_[a,b])(x) = Phi(x - a) - Phi(x - b)`.

/// Compactly supported piecewise polynomial; zero outside `[breaks[0], breaks[last]]`.
/// Piece `i` is `sum_k coeffs[i][k] (x - breaks[i])^k` on `[breaks[i], breaks[i+1])`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewisePoly {
    breaks: Vec<f64>,
    coeffs: Vec<Vec<f64>>,
}

fn poly_eval(c: &[f64], t: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &a| acc * t + a)
}

/// Coefficients of `p(t + s)` given those of `p(t)`.
fn poly_shift(c: &[f64], s: f64) -> Vec<f64> {
    let n = c.len();
    let mut out = c.to_vec();
    // Repeated synthetic division (Taylor shift).
    for i in 0..n {
        for j in (i..n - 1).rev() {
            out[j] += s * out[j + 1];
        }
    }
    out
}

fn poly_integral(c: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; c.len() + 1];
    for (k, &a) in c.iter().enumerate() {
        out[k + 1] = a / (k as f64 + 1.0);
    }
    out
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn merge_breaks(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut all: Vec<f64> = a.iter().chain(b).copied().collect();
    all.sort_by(f64::total_cmp);
    let mut out: Vec<f64> = Vec::with_capacity(all.len());
    for x in all {
        match out.last() {
            Some(&last) if (x - last).abs() <= 1e-13 * (1.0 + x.abs()) => {}
            _ => out.push(x),
        }
    }
    out
}

impl PiecewisePoly {
    /// The zero function.
    pub fn zero() -> Self {
        Self { breaks: Vec::new(), coeffs: Vec::new() }
    }

    /// Indicator of `[a, b]`.
    pub fn indicator(a: f64, b: f64) -> Self {
        assert!(b > a, "empty interval");
        Self { breaks: vec![a, b], coeffs: vec![vec![1.0]] }
    }

    /// Indicator of a union of disjoint intervals.
    pub fn union_indicator(intervals: &[(f64, f64)]) -> Self {
        intervals.iter().fold(Self::zero(), |acc, &(a, b)| acc.add(&Self::indicator(a, b)))
    }

    pub fn breaks(&self) -> &[f64] {
        &self.breaks
    }

    /// Support hull `[lo, hi]`, or `None` for the zero function.
    pub fn support(&self) -> Option<(f64, f64)> {
        Some((*self.breaks.first()?, *self.breaks.last()?))
    }

    pub fn eval(&self, x: f64) -> f64 {
        let Some((lo, hi)) = self.support() else { return 0.0 };
        if x < lo || x > hi {
            return 0.0;
        }
        let i = (self.breaks.partition_point(|&b| b <= x).max(1) - 1).min(self.coeffs.len() - 1);
        poly_eval(&self.coeffs[i], x - self.breaks[i])
    }

    /// Local polynomial valid on `[u, v]` (a sub-interval of one piece), expressed in `t = x - u`.
    fn local_at(&self, u: f64, v: f64) -> Vec<f64> {
        let Some((lo, hi)) = self.support() else { return vec![0.0] };
        let mid = 0.5 * (u + v);
        if mid < lo || mid > hi {
            return vec![0.0];
        }
        let i = (self.breaks.partition_point(|&b| b <= mid).max(1) - 1).min(self.coeffs.len() - 1);
        poly_shift(&self.coeffs[i], u - self.breaks[i])
    }

    /// Re-express on a refined breakpoint set covering the support.
    fn refine(&self, breaks: &[f64]) -> Vec<Vec<f64>> {
        breaks.windows(2).map(|w| self.local_at(w[0], w[1])).collect()
    }

    pub fn add(&self, other: &Self) -> Self {
        if self.breaks.is_empty() {
            return other.clone();
        }
        if other.breaks.is_empty() {
            return self.clone();
        }
        let breaks = merge_breaks(&self.breaks, &other.breaks);
        let a = self.refine(&breaks);
        let b = other.refine(&breaks);
        let coeffs = a
            .into_iter()
            .zip(b)
            .map(|(p, q)| {
                let n = p.len().max(q.len());
                (0..n).map(|k| p.get(k).copied().unwrap_or(0.0) + q.get(k).copied().unwrap_or(0.0)).collect()
            })
            .collect();
        Self { breaks, coeffs }
    }

    /// Antiderivative pieces `Phi_i(t) = C_i + int_0^t p_i`, plus the total integral.
    fn antiderivative(&self) -> (Vec<Vec<f64>>, f64) {
        let mut pieces = Vec::with_capacity(self.coeffs.len());
        let mut acc = 0.0;
        for (i, c) in self.coeffs.iter().enumerate() {
            let mut ic = poly_integral(c);
            ic[0] = acc;
            acc = poly_eval(&ic, self.breaks[i + 1] - self.breaks[i]);
            pieces.push(ic);
        }
        (pieces, acc)
    }

    /// Integral over the line.
    pub fn integral(&self) -> f64 {
        self.antiderivative().1
    }

    /// `int phi^2`, exact on each piece.
    pub fn l2_norm_sq(&self) -> f64 {
        self.coeffs
            .iter()
            .zip(self.breaks.windows(2))
            .map(|(c, w)| poly_eval(&poly_integral(&poly_mul(c, c)), w[1] - w[0]))
            .sum()
    }

    /// Convolution with the indicator of `[a, b]`.
    pub fn convolve_interval(&self, a: f64, b: f64) -> Self {
        let Some((lo, hi)) = self.support() else { return Self::zero() };
        let (anti, total) = self.antiderivative();
        let shifted_a: Vec<f64> = self.breaks.iter().map(|x| x + a).collect();
        let shifted_b: Vec<f64> = self.breaks.iter().map(|x| x + b).collect();
        let breaks = merge_breaks(&shifted_a, &shifted_b);
        // Phi(x - s) on [u, v] as a polynomial in t = x - u.
        let local_anti = |u: f64, v: f64, s: f64| -> Vec<f64> {
            let mid = 0.5 * (u + v) - s;
            if mid <= lo {
                vec![0.0]
            } else if mid >= hi {
                vec![total]
            } else {
                let i = (self.breaks.partition_point(|&x| x <= mid).max(1) - 1).min(anti.len() - 1);
                poly_shift(&anti[i], u - s - self.breaks[i])
            }
        };
        let coeffs = breaks
            .windows(2)
            .map(|w| {
                let p = local_anti(w[0], w[1], a);
                let q = local_anti(w[0], w[1], b);
                let n = p.len().max(q.len());
                (0..n).map(|k| p.get(k).copied().unwrap_or(0.0) - q.get(k).copied().unwrap_or(0.0)).collect()
            })
            .collect();
        Self { breaks, coeffs }
    }

    /// Convolution with the indicator of a union of intervals.
    pub fn convolve_union(&self, intervals: &[(f64, f64)]) -> Self {
        intervals.iter().fold(Self::zero(), |acc, &(a, b)| acc.add(&self.convolve_interval(a, b)))
    }
}

/// `1_E^{*n}` for `E` a union of intervals and `n >= 1`.
pub fn convolution_power(intervals: &[(f64, f64)], n: usize) -> PiecewisePoly {
    assert!(n >= 1);
    let mut phi = PiecewisePoly::union_indicator(intervals);
    for _ in 1..n {
        phi = phi.convolve_union(intervals);
    }
    phi
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tent_and_triple_convolution_closed_forms() {
        let tent = convolution_power(&[(-1.0, 1.0)], 2);
        for k in 0..=40 {
            let r = -2.5 + k as f64 * 0.125;
            let expected = (2.0 - r.abs()).max(0.0);
            assert!((tent.eval(r) - expected).abs() < 1e-14);
        }
        let triple = convolution_power(&[(-1.0, 1.0)], 3);
        for k in 0..=64 {
            let r = -4.0 + k as f64 * 0.125;
            let a = r.abs();
            let expected = if a <= 1.0 {
                3.0 - r * r
            } else if a <= 3.0 {
                0.5 * (3.0 - a).powi(2)
            } else {
                0.0
            };
            assert!((triple.eval(r) - expected).abs() < 1e-13, "r={r}");
        }
        assert!((tent.l2_norm_sq() - 16.0 / 3.0).abs() < 1e-13);
    }

    #[test]
    fn irwin_hall_density() {
        // 1_[0,1]^{*n} is the Irwin-Hall density.
        let n = 5;
        let phi = convolution_power(&[(0.0, 1.0)], n);
        let irwin_hall = |x: f64| -> f64 {
            let mut s = 0.0;
            let mut binom = 1.0;
            let mut fact = 1.0;
            for k in 1..n {
                fact *= k as f64;
            }
            for k in 0..=n {
                if (k as f64) < x {
                    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                    s += sign * binom * (x - k as f64).powi(n as i32 - 1);
                }
                binom = binom * (n - k) as f64 / (k + 1) as f64;
            }
            s / fact
        };
        for k in 1..50 {
            let x = k as f64 * 0.1;
            assert!((phi.eval(x) - irwin_hall(x)).abs() < 1e-12);
        }
        assert!((phi.integral() - 1.0).abs() < 1e-13);
    }

    #[test]
    fn unit_interval_autocorrelation_norm() {
        let phi = convolution_power(&[(0.0, 1.0)], 2);
        assert!((phi.l2_norm_sq() - 2.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn union_mass_is_multiplicative() {
        let e = [(-1.0, 0.0), (0.5, 1.5)];
        let phi = convolution_power(&e, 3);
        assert!((phi.integral() - 8.0).abs() < 1e-12);
    }
}
