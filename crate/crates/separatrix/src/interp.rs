//! Small interpolation utilities: natural cubic splines on sorted knots and
//! cubic Hermite evaluation for dense trajectory output.

/// Cubic spline through `(x[i], y[i])`, `x` strictly increasing; not-a-knot
/// end conditions (natural ends create an O(h^2) boundary layer that would
/// dominate the interpolation error of the z grids).
#[derive(Debug, Clone)]
pub struct CubicSpline {
    x: Vec<f64>,
    y: Vec<f64>,
    /// second derivatives at the knots
    m: Vec<f64>,
}

impl CubicSpline {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        assert_eq!(x.len(), y.len());
        assert!(x.len() >= 2, "spline needs at least two knots");
        let n = x.len();
        let mut m = vec![0.0; n];
        if n >= 4 {
            // unknowns m[1..n-1]; m[0], m[n-1] eliminated via third-derivative
            // continuity at x[1] and x[n-2] (not-a-knot)
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut upper = vec![0.0; k];
            let mut lower = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for j in 0..k {
                let i = j + 1;
                let h0 = x[i] - x[i - 1];
                let h1 = x[i + 1] - x[i];
                diag[j] = 2.0 * (h0 + h1);
                lower[j] = h0;
                upper[j] = h1;
                rhs[j] = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
            }
            {
                // m0 = ((h0+h1) m1 - h0 m2) / h1
                let h0 = x[1] - x[0];
                let h1 = x[2] - x[1];
                diag[0] += lower[0] * (h0 + h1) / h1;
                upper[0] -= lower[0] * h0 / h1;
            }
            {
                // m[n-1] = ((hlast+hprev) m[n-2] - hlast m[n-3]) / hprev
                let hlast = x[n - 1] - x[n - 2];
                let hprev = x[n - 2] - x[n - 3];
                diag[k - 1] += upper[k - 1] * (hprev + hlast) / hprev;
                lower[k - 1] -= upper[k - 1] * hlast / hprev;
            }
            for j in 1..k {
                let w = lower[j] / diag[j - 1];
                diag[j] -= w * upper[j - 1];
                rhs[j] -= w * rhs[j - 1];
            }
            let mut sol = vec![0.0; k];
            sol[k - 1] = rhs[k - 1] / diag[k - 1];
            for j in (0..k - 1).rev() {
                sol[j] = (rhs[j] - upper[j] * sol[j + 1]) / diag[j];
            }
            for j in 0..k {
                m[j + 1] = sol[j];
            }
            let h0 = x[1] - x[0];
            let h1 = x[2] - x[1];
            m[0] = ((h0 + h1) * m[1] - h0 * m[2]) / h1;
            let hlast = x[n - 1] - x[n - 2];
            let hprev = x[n - 2] - x[n - 3];
            m[n - 1] = ((hprev + hlast) * m[n - 2] - hlast * m[n - 3]) / hprev;
        } else if n == 3 {
            // single parabola-like fit: natural is fine for 3 points
            let h0 = x[1] - x[0];
            let h1 = x[2] - x[1];
            m[1] = 6.0 * ((y[2] - y[1]) / h1 - (y[1] - y[0]) / h0) / (2.0 * (h0 + h1));
        }
        CubicSpline { x, y, m }
    }

    fn segment(&self, xq: f64) -> usize {
        let n = self.x.len();
        match self.x.binary_search_by(|v| v.partial_cmp(&xq).unwrap()) {
            Ok(i) => i.min(n - 2),
            Err(i) => i.saturating_sub(1).min(n - 2),
        }
    }

    pub fn eval(&self, xq: f64) -> f64 {
        let i = self.segment(xq);
        let h = self.x[i + 1] - self.x[i];
        let a = (self.x[i + 1] - xq) / h;
        let b = (xq - self.x[i]) / h;
        a * self.y[i]
            + b * self.y[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / 6.0
    }

    pub fn derivative(&self, xq: f64) -> f64 {
        let i = self.segment(xq);
        let h = self.x[i + 1] - self.x[i];
        let a = (self.x[i + 1] - xq) / h;
        let b = (xq - self.x[i]) / h;
        (self.y[i + 1] - self.y[i]) / h
            + ((3.0 * b * b - 1.0) * self.m[i + 1] - (3.0 * a * a - 1.0) * self.m[i]) * h / 6.0
    }

}

/// Cubic Hermite interpolation of `(t0, y0, dy0)`--`(t1, y1, dy1)` at `t`.
pub fn hermite(t0: f64, y0: f64, dy0: f64, t1: f64, y1: f64, dy1: f64, t: f64) -> f64 {
    let h = t1 - t0;
    let s = (t - t0) / h;
    let s2 = s * s;
    let s3 = s2 * s;
    (2.0 * s3 - 3.0 * s2 + 1.0) * y0
        + (s3 - 2.0 * s2 + s) * h * dy0
        + (-2.0 * s3 + 3.0 * s2) * y1
        + (s3 - s2) * h * dy1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spline_reproduces_linear_exactly() {
        let x: Vec<f64> = (0..9).map(|i| 0.5 + 0.25 * i as f64).collect();
        let y: Vec<f64> = x.iter().map(|&v| 3.0 - 2.0 * v).collect();
        let s = CubicSpline::new(x, y);
        for &xq in &[0.5, 0.61, 1.3, 2.0, 2.49] {
            assert!((s.eval(xq) - (3.0 - 2.0 * xq)).abs() < 1e-14);
            assert!((s.derivative(xq) + 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn spline_accuracy_on_smooth_function() {
        let n = 41;
        let x: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64 * 2.0).collect();
        let y: Vec<f64> = x.iter().map(|&v| (1.5 * v).sin()).collect();
        let s = CubicSpline::new(x, y);
        let mut worst: f64 = 0.0;
        for i in 0..400 {
            let xq = 0.2 + 1.6 * i as f64 / 399.0;
            worst = worst.max((s.eval(xq) - (1.5 * xq).sin()).abs());
        }
        assert!(worst < 5e-7, "spline error {worst:e}");
    }

    #[test]
    fn hermite_endpoint_match() {
        let f = |t: f64| t * t * t - t;
        let df = |t: f64| 3.0 * t * t - 1.0;
        // cubic Hermite is exact for cubics
        for &t in &[0.3, 0.7, 0.95] {
            let v = hermite(0.2, f(0.2), df(0.2), 1.0, f(1.0), df(1.0), t);
            assert!((v - f(t)).abs() < 1e-14);
        }
    }
}
