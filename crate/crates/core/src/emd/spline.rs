//! Cubic spline interpolation on sorted knots.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SplineError {
    #[error("a spline needs at least 2 knots, got {0}")]
    TooFewKnots(usize),
    #[error("knot abscissae must be strictly increasing")]
    UnsortedKnots,
    #[error("knot and value arrays differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

/// Boundary condition on the second derivative at the first and last knot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EndCondition {
    /// Zero curvature at both ends.
    Natural,
    /// Prescribed curvature at both ends.
    SecondDerivative { start: f64, end: f64 },
}

/// Piecewise cubic through `(xs[i], ys[i])`, stored as knot values plus the
/// second derivative at each knot.
#[derive(Debug, Clone)]
pub struct CubicSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    curvature: Vec<f64>,
}

impl CubicSpline {
    pub fn new(xs: &[f64], ys: &[f64], end: EndCondition) -> Result<Self, SplineError> {
        if xs.len() != ys.len() {
            return Err(SplineError::LengthMismatch(xs.len(), ys.len()));
        }
        let n = xs.len();
        if n < 2 {
            return Err(SplineError::TooFewKnots(n));
        }
        if xs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(SplineError::UnsortedKnots);
        }
        let (m_start, m_end) = match end {
            EndCondition::Natural => (0.0, 0.0),
            EndCondition::SecondDerivative { start, end } => (start, end),
        };
        let mut curvature = vec![0.0; n];
        curvature[0] = m_start;
        curvature[n - 1] = m_end;

        if n > 2 {
            // Tridiagonal system for the interior curvatures, solved with the
            // Thomas algorithm.
            let m = n - 2;
            let mut diag = vec![0.0; m];
            let mut upper = vec![0.0; m];
            let mut rhs = vec![0.0; m];
            for k in 0..m {
                let i = k + 1;
                let h0 = xs[i] - xs[i - 1];
                let h1 = xs[i + 1] - xs[i];
                diag[k] = 2.0 * (h0 + h1);
                upper[k] = h1;
                rhs[k] = 6.0 * ((ys[i + 1] - ys[i]) / h1 - (ys[i] - ys[i - 1]) / h0);
            }
            rhs[0] -= (xs[1] - xs[0]) * m_start;
            rhs[m - 1] -= (xs[n - 1] - xs[n - 2]) * m_end;

            for k in 1..m {
                let lower = xs[k + 1] - xs[k];
                let w = lower / diag[k - 1];
                diag[k] -= w * upper[k - 1];
                rhs[k] -= w * rhs[k - 1];
            }
            curvature[m] = rhs[m - 1] / diag[m - 1];
            for k in (0..m - 1).rev() {
                curvature[k + 1] = (rhs[k] - upper[k] * curvature[k + 2]) / diag[k];
            }
        }

        Ok(Self {
            xs: xs.to_vec(),
            ys: ys.to_vec(),
            curvature,
        })
    }

    fn eval_in(&self, i: usize, x: f64) -> f64 {
        let (x0, x1) = (self.xs[i], self.xs[i + 1]);
        let (y0, y1) = (self.ys[i], self.ys[i + 1]);
        let (m0, m1) = (self.curvature[i], self.curvature[i + 1]);
        let h = x1 - x0;
        let a = x1 - x;
        let b = x - x0;
        (m0 * a * a * a + m1 * b * b * b) / (6.0 * h)
            + (y0 / h - m0 * h / 6.0) * a
            + (y1 / h - m1 * h / 6.0) * b
    }

    fn slope_at_start(&self) -> f64 {
        let h = self.xs[1] - self.xs[0];
        (self.ys[1] - self.ys[0]) / h - h * (2.0 * self.curvature[0] + self.curvature[1]) / 6.0
    }

    fn slope_at_end(&self) -> f64 {
        let n = self.xs.len();
        let h = self.xs[n - 1] - self.xs[n - 2];
        (self.ys[n - 1] - self.ys[n - 2]) / h
            + h * (self.curvature[n - 2] + 2.0 * self.curvature[n - 1]) / 6.0
    }

    /// Evaluates the spline; outside the knot range it continues along the
    /// tangent at the nearest end knot.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x < self.xs[0] {
            return self.ys[0] + self.slope_at_start() * (x - self.xs[0]);
        }
        if x > self.xs[n - 1] {
            return self.ys[n - 1] + self.slope_at_end() * (x - self.xs[n - 1]);
        }
        let i = match self.xs.partition_point(|&k| k <= x) {
            0 => 0,
            p => (p - 1).min(n - 2),
        };
        self.eval_in(i, x)
    }

    /// Evaluates at the integer abscissae `0, 1, .., len - 1` in one pass.
    pub fn eval_grid(&self, len: usize) -> Vec<f64> {
        let n = self.xs.len();
        let mut out = Vec::with_capacity(len);
        let mut i = 0;
        for t in 0..len {
            let x = t as f64;
            if x < self.xs[0] || x > self.xs[n - 1] {
                out.push(self.eval(x));
                continue;
            }
            while i + 2 < n && x > self.xs[i + 1] {
                i += 1;
            }
            out.push(self.eval_in(i, x));
        }
        out
    }
}
