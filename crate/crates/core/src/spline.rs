//! Clamped cubic spline on a strictly increasing 1D node set.

#[derive(Debug, Clone)]
pub struct CubicSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
}

impl CubicSpline {
    /// Interpolates `ys` at `xs` with prescribed end slopes.
    pub fn clamped(xs: &[f64], ys: &[f64], slope_lo: f64, slope_hi: f64) -> Self {
        let n = xs.len();
        assert!(n >= 2 && ys.len() == n);
        // tridiagonal system for the knot second derivatives
        let mut sub = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut sup = vec![0.0; n];
        let mut rhs = vec![0.0; n];
        let h0 = xs[1] - xs[0];
        diag[0] = h0 / 3.0;
        sup[0] = h0 / 6.0;
        rhs[0] = (ys[1] - ys[0]) / h0 - slope_lo;
        for i in 1..n - 1 {
            let hl = xs[i] - xs[i - 1];
            let hr = xs[i + 1] - xs[i];
            sub[i] = hl / 6.0;
            diag[i] = (hl + hr) / 3.0;
            sup[i] = hr / 6.0;
            rhs[i] = (ys[i + 1] - ys[i]) / hr - (ys[i] - ys[i - 1]) / hl;
        }
        let hn = xs[n - 1] - xs[n - 2];
        sub[n - 1] = hn / 6.0;
        diag[n - 1] = hn / 3.0;
        rhs[n - 1] = slope_hi - (ys[n - 1] - ys[n - 2]) / hn;
        // Thomas algorithm
        for i in 1..n {
            let f = sub[i] / diag[i - 1];
            diag[i] -= f * sup[i - 1];
            rhs[i] -= f * rhs[i - 1];
        }
        let mut m = vec![0.0; n];
        m[n - 1] = rhs[n - 1] / diag[n - 1];
        for i in (0..n - 1).rev() {
            m[i] = (rhs[i] - sup[i] * m[i + 1]) / diag[i];
        }
        Self {
            xs: xs.to_vec(),
            ys: ys.to_vec(),
            m,
        }
    }

    fn segment(&self, x: f64) -> usize {
        let n = self.xs.len();
        match self.xs.binary_search_by(|v| v.total_cmp(&x)) {
            Ok(i) => i.min(n - 2),
            Err(i) => i.saturating_sub(1).min(n - 2),
        }
    }

    /// Value, first and second derivative at `x`. Outside the knot range the
    /// end polynomials are extended.
    pub fn eval(&self, x: f64) -> (f64, f64, f64) {
        let i = self.segment(x);
        let (x0, x1) = (self.xs[i], self.xs[i + 1]);
        let h = x1 - x0;
        let a = (x1 - x) / h;
        let b = (x - x0) / h;
        let (m0, m1) = (self.m[i], self.m[i + 1]);
        let (y0, y1) = (self.ys[i], self.ys[i + 1]);
        let v = a * y0 + b * y1 + ((a * a * a - a) * m0 + (b * b * b - b) * m1) * h * h / 6.0;
        let d = (y1 - y0) / h + (-(3.0 * a * a - 1.0) * m0 + (3.0 * b * b - 1.0) * m1) * h / 6.0;
        let dd = a * m0 + b * m1;
        (v, d, dd)
    }

    pub fn knots(&self) -> &[f64] {
        &self.xs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproduces_cubics() {
        let f = |x: f64| 1.0 - 2.0 * x + 0.5 * x * x + 0.3 * x * x * x;
        let df = |x: f64| -2.0 + x + 0.9 * x * x;
        let xs: Vec<f64> = (0..9).map(|i| i as f64 / 8.0).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
        let s = CubicSpline::clamped(&xs, &ys, df(0.0), df(1.0));
        for k in 0..50 {
            let x = k as f64 / 49.0;
            let (v, d, _) = s.eval(x);
            assert!((v - f(x)).abs() < 1e-13);
            assert!((d - df(x)).abs() < 1e-12);
        }
        assert_eq!(s.eval(xs[3]).0, ys[3]);
    }
}
