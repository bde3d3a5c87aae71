//! Monotone piecewise cubic Hermite interpolation (Fritsch-Carlson slopes).

/// Interpolant through `(x_i, y_i)` that preserves monotonicity between nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneCubic {
    x: Vec<f64>,
    y: Vec<f64>,
    slopes: Vec<f64>,
}

impl MonotoneCubic {
    /// Build from strictly increasing `x` with at least two nodes.
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        assert!(x.len() >= 2 && x.len() == y.len(), "need matching nodes");
        assert!(x.windows(2).all(|w| w[1] > w[0]), "nodes must increase");
        let n = x.len();
        let secant: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / (x[i + 1] - x[i])).collect();
        let mut slopes = vec![0.0; n];
        for i in 1..n - 1 {
            let (a, b) = (secant[i - 1], secant[i]);
            if a * b > 0.0 {
                let h0 = x[i] - x[i - 1];
                let h1 = x[i + 1] - x[i];
                let w1 = 2.0 * h1 + h0;
                let w2 = h1 + 2.0 * h0;
                slopes[i] = (w1 + w2) / (w1 / a + w2 / b);
            }
        }
        slopes[0] = end_slope(x[1] - x[0], x.get(2).map_or(0.0, |x2| x2 - x[1]), secant[0], secant.get(1).copied());
        slopes[n - 1] = end_slope(
            x[n - 1] - x[n - 2],
            if n > 2 { x[n - 2] - x[n - 3] } else { 0.0 },
            secant[n - 2],
            if n > 2 { Some(secant[n - 3]) } else { None },
        );
        Self { x, y, slopes }
    }

    pub fn nodes(&self) -> &[f64] {
        &self.x
    }

    pub fn values(&self) -> &[f64] {
        &self.y
    }

    /// Evaluate; outside the node range the end value is held constant.
    pub fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        if t <= self.x[0] {
            return self.y[0];
        }
        if t >= self.x[n - 1] {
            return self.y[n - 1];
        }
        let i = self.x.partition_point(|&v| v <= t) - 1;
        let h = self.x[i + 1] - self.x[i];
        let s = (t - self.x[i]) / h;
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        h00 * self.y[i] + h10 * h * self.slopes[i] + h01 * self.y[i + 1] + h11 * h * self.slopes[i + 1]
    }
}

fn end_slope(h0: f64, h1: f64, d0: f64, d1: Option<f64>) -> f64 {
    let Some(d1) = d1 else { return d0 };
    let m = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if m * d0 <= 0.0 {
        0.0
    } else if d0 * d1 <= 0.0 && m.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reproduces_nodes_and_quadratics_closely() {
        let x: Vec<f64> = (0..=40).map(|i| i as f64 * 0.05).collect();
        let y: Vec<f64> = x.iter().map(|t| 3.0 - t * t).collect();
        let p = MonotoneCubic::new(x.clone(), y.clone());
        for (xi, yi) in x.iter().zip(&y) {
            assert_eq!(p.eval(*xi), *yi);
        }
        let worst =
            (0..200).map(|k| 0.001 + k as f64 * 0.00995).map(|t| (p.eval(t) - (3.0 - t * t)).abs()).fold(0.0, f64::max);
        assert!(worst < 3e-4, "worst {worst}");
    }

    proptest! {
        #[test]
        fn monotone_data_gives_monotone_interpolant(steps in prop::collection::vec(0.0f64..1.0, 3..30)) {
            let x: Vec<f64> = (0..steps.len()).map(|i| i as f64).collect();
            let mut acc = 0.0;
            let y: Vec<f64> = steps.iter().map(|s| { acc -= s; acc }).collect();
            let p = MonotoneCubic::new(x, y);
            let mut prev = f64::INFINITY;
            for k in 0..=500 {
                let t = k as f64 * (steps.len() - 1) as f64 / 500.0;
                let v = p.eval(t);
                prop_assert!(v <= prev + 1e-12);
                prev = v;
            }
        }
    }
}
