//! Uniform space/time grids, grid-sampled fields and the discrete calculus
//! (derivatives, quadrature, interpolation, tridiagonal solves) shared by
//! every solver.

use std::io::Write;

use crate::error::{Result, SolverError};

/// Uniform 1-D spatial grid with `n >= 3` nodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid1D {
    x_min: f64,
    x_max: f64,
    n: usize,
}

impl Grid1D {
    pub fn new(x_min: f64, x_max: f64, n: usize) -> Result<Self> {
        if !(x_min.is_finite() && x_max.is_finite()) {
            return Err(SolverError::invalid("grid", "bounds must be finite"));
        }
        if x_max <= x_min {
            return Err(SolverError::invalid("grid", "x_max must exceed x_min"));
        }
        if n < 3 {
            return Err(SolverError::invalid("grid", "need at least 3 nodes"));
        }
        Ok(Self { x_min, x_max, n })
    }

    /// Grid with spacing as close as possible to `dx` (the end point is kept).
    pub fn with_spacing(x_min: f64, x_max: f64, dx: f64) -> Result<Self> {
        if !(dx > 0.0) {
            return Err(SolverError::invalid("dx", "must be positive"));
        }
        let cells = ((x_max - x_min) / dx).round().max(2.0) as usize;
        Self::new(x_min, x_max, cells + 1)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n - 1) as f64
    }

    #[inline]
    pub fn x(&self, j: usize) -> f64 {
        if j + 1 == self.n {
            self.x_max
        } else {
            self.x_min + j as f64 * self.dx()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.x(j)).collect()
    }

    /// Index of the node nearest to `x`, clamped to the grid.
    pub fn nearest(&self, x: f64) -> usize {
        let s = ((x - self.x_min) / self.dx()).round();
        s.clamp(0.0, (self.n - 1) as f64) as usize
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.x_min && x <= self.x_max
    }
}

/// Uniform time grid `t0 < t1` with `steps >= 1` intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    t1: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, steps: usize) -> Result<Self> {
        if !(t1 > t0) || !t0.is_finite() || !t1.is_finite() {
            return Err(SolverError::invalid("time", "need finite t1 > t0"));
        }
        if steps == 0 {
            return Err(SolverError::invalid("steps", "need at least one step"));
        }
        Ok(Self { t0, t1, steps })
    }

    /// Grid whose step is as close as possible to `dt`.
    pub fn with_step(t0: f64, t1: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(SolverError::invalid("dt", "must be positive"));
        }
        let steps = ((t1 - t0) / dt).round().max(1.0) as usize;
        Self::new(t0, t1, steps)
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t1(&self) -> f64 {
        self.t1
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        (self.t1 - self.t0) / self.steps as f64
    }

    #[inline]
    pub fn t(&self, k: usize) -> f64 {
        if k == self.steps {
            self.t1
        } else {
            self.t0 + k as f64 * self.dt()
        }
    }

    /// Number of time nodes (`steps + 1`).
    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    /// Index of the node nearest to `t`, clamped.
    pub fn nearest(&self, t: f64) -> usize {
        let s = ((t - self.t0) / self.dt()).round();
        s.clamp(0.0, self.steps as f64) as usize
    }

    /// Lower node index and fractional weight for linear interpolation in time.
    pub fn locate(&self, t: f64) -> (usize, f64) {
        let s = ((t - self.t0) / self.dt()).clamp(0.0, self.steps as f64);
        let k = (s.floor() as usize).min(self.steps.saturating_sub(1));
        (k, s - k as f64)
    }
}

/// Node values on a [`Grid1D`].
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: Grid1D,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: Grid1D, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(SolverError::invalid(
                "field",
                format!("{} values for {} nodes", values.len(), grid.len()),
            ));
        }
        if let Some(j) = values.iter().position(|v| !v.is_finite()) {
            return Err(SolverError::NonFiniteEvaluation {
                what: "field value",
                t: f64::NAN,
                x: grid.x(j),
            });
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: Grid1D, f: impl Fn(f64) -> f64) -> Self {
        let values = (0..grid.len()).map(|j| f(grid.x(j))).collect();
        Self { grid, values }
    }

    pub fn zeros(grid: Grid1D) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.len()],
        }
    }

    /// Builds a field without the finiteness check; for internal hot loops
    /// whose inputs are already validated.
    pub(crate) fn from_raw(grid: Grid1D, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn map(&self, f: impl Fn(f64, f64) -> f64) -> Field {
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(j, &v)| f(self.grid.x(j), v))
            .collect();
        Field::from_raw(self.grid, values)
    }

    /// `a·self + b·other` on the same grid.
    pub fn axpby(&self, a: f64, other: &Field, b: f64) -> Field {
        debug_assert_eq!(self.grid, other.grid);
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Field::from_raw(self.grid, values)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Two-column CSV (`x,value`).
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "x,value")?;
        for (j, v) in self.values.iter().enumerate() {
            writeln!(out, "{},{}", fmt_num(self.grid.x(j)), fmt_num(*v))?;
        }
        Ok(())
    }
}

/// Locale-independent float formatting with 17 significant digits.
pub fn fmt_num(v: f64) -> String {
    format!("{:.16e}", v)
}

/// Central differences in the interior, second-order one-sided at the ends.
pub fn gradient_central(f: &Field) -> Field {
    let v = f.values();
    let n = v.len();
    let h = f.grid().dx();
    let mut out = vec![0.0; n];
    for j in 1..n - 1 {
        out[j] = (v[j + 1] - v[j - 1]) / (2.0 * h);
    }
    out[0] = (-3.0 * v[0] + 4.0 * v[1] - v[2]) / (2.0 * h);
    out[n - 1] = (3.0 * v[n - 1] - 4.0 * v[n - 2] + v[n - 3]) / (2.0 * h);
    Field::from_raw(*f.grid(), out)
}

/// Three-point second difference in the interior; one-sided second-order
/// stencils at the ends (copied from the neighbour when `n == 3`).
pub fn second_derivative(f: &Field) -> Field {
    let v = f.values();
    let n = v.len();
    let h2 = f.grid().dx().powi(2);
    let mut out = vec![0.0; n];
    for j in 1..n - 1 {
        out[j] = (v[j + 1] - 2.0 * v[j] + v[j - 1]) / h2;
    }
    if n >= 4 {
        out[0] = (2.0 * v[0] - 5.0 * v[1] + 4.0 * v[2] - v[3]) / h2;
        out[n - 1] = (2.0 * v[n - 1] - 5.0 * v[n - 2] + 4.0 * v[n - 3] - v[n - 4]) / h2;
    } else {
        out[0] = out[1];
        out[n - 1] = out[1];
    }
    Field::from_raw(*f.grid(), out)
}

/// Trapezoidal quadrature over the whole grid.
pub fn trapezoid(f: &Field) -> f64 {
    trapezoid_values(f.values(), f.grid().dx())
}

pub(crate) fn trapezoid_values(v: &[f64], h: f64) -> f64 {
    let n = v.len();
    if n < 2 {
        return 0.0;
    }
    let inner = pairwise_sum(&v[1..n - 1]);
    h * (inner + 0.5 * (v[0] + v[n - 1]))
}

/// Running trapezoid integral; `out[0] = 0`.
pub fn cumulative_trapezoid(f: &Field) -> Vec<f64> {
    let v = f.values();
    let h = f.grid().dx();
    let mut out = Vec::with_capacity(v.len());
    let mut acc = 0.0;
    out.push(0.0);
    for w in v.windows(2) {
        acc += 0.5 * h * (w[0] + w[1]);
        out.push(acc);
    }
    out
}

/// Result of [`interp_linear`]; `clamped` is set when `x` fell outside the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interpolated {
    pub value: f64,
    pub clamped: bool,
}

/// Piecewise-linear interpolation; outside the grid the boundary value is
/// returned with the `clamped` flag raised.
pub fn interp_linear(f: &Field, x: f64) -> Interpolated {
    let g = f.grid();
    let clamped = !g.contains(x);
    Interpolated {
        value: interp_values(g, f.values(), x),
        clamped,
    }
}

#[inline]
pub(crate) fn interp_values(g: &Grid1D, v: &[f64], x: f64) -> f64 {
    let n = g.len();
    let s = ((x - g.x_min()) / g.dx()).clamp(0.0, (n - 1) as f64);
    let r = s.round();
    if (s - r).abs() < 1e-9 {
        return v[r as usize];
    }
    let j = (s.floor() as usize).min(n - 2);
    let w = s - j as f64;
    v[j] * (1.0 - w) + v[j + 1] * w
}

/// Four-point Lagrange interpolation, linear in the two end cells.
pub(crate) fn interp_cubic(g: &Grid1D, v: &[f64], x: f64) -> f64 {
    let n = g.len();
    let s = ((x - g.x_min()) / g.dx()).clamp(0.0, (n - 1) as f64);
    let j = (s.floor() as usize).min(n - 2);
    if j == 0 || j + 2 >= n {
        return interp_values(g, v, x);
    }
    let w = s - j as f64;
    let a = -w * (w - 1.0) * (w - 2.0) / 6.0;
    let b = (w + 1.0) * (w - 1.0) * (w - 2.0) / 2.0;
    let c = -(w + 1.0) * w * (w - 2.0) / 2.0;
    let d = (w + 1.0) * w * (w - 1.0) / 6.0;
    a * v[j - 1] + b * v[j] + c * v[j + 1] + d * v[j + 2]
}

/// Pairwise summation; result is independent of how the caller partitions work.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    const BLOCK: usize = 64;
    if v.len() <= BLOCK {
        v.iter().sum()
    } else {
        let mid = v.len() / 2;
        pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
    }
}

/// Thomas algorithm for `lower[j] x[j-1] + diag[j] x[j] + upper[j] x[j+1] = rhs[j]`.
/// `lower[0]` and `upper[n-1]` are ignored. Overwrites `rhs` with the solution.
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64]) {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut beta = diag[0];
    rhs[0] /= beta;
    for j in 1..n {
        c[j - 1] = upper[j - 1] / beta;
        beta = diag[j] - lower[j] * c[j - 1];
        rhs[j] = (rhs[j] - lower[j] * rhs[j - 1]) / beta;
    }
    for j in (0..n - 1).rev() {
        rhs[j] -= c[j] * rhs[j + 1];
    }
}

/// Bisection root finder on a sign-changing bracket.
pub fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> Result<f64> {
    let mut flo = f(lo);
    let fhi = f(hi);
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo.signum() == fhi.signum() || !flo.is_finite() || !fhi.is_finite() {
        return Err(SolverError::RootNotBracketed { lo, hi });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm == 0.0 || (hi - lo) < tol {
            return Ok(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(a: f64, b: f64, n: usize) -> Grid1D {
        Grid1D::new(a, b, n).unwrap()
    }

    fn normal_pdf(x: f64, m: f64, s: f64) -> f64 {
        (-(x - m).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
    }

    #[test]
    fn grid_rejects_degenerate_inputs() {
        assert!(Grid1D::new(0.0, 1.0, 2).is_err());
        assert!(Grid1D::new(1.0, 1.0, 10).is_err());
        assert!(TimeGrid::new(0.0, 0.0, 10).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
        assert!(Field::new(grid(0.0, 1.0, 5), vec![0.0; 4]).is_err());
        assert!(Field::new(grid(0.0, 1.0, 3), vec![0.0, f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn gradient_of_square() {
        let f = Field::from_fn(grid(-1.0, 1.0, 201), |x| x * x);
        let d = gradient_central(&f);
        for j in 1..200 {
            let x = f.grid().x(j);
            assert!((d.values()[j] - 2.0 * x).abs() < 1e-3);
        }
        let c = Field::from_fn(grid(-1.0, 1.0, 11), |_| 3.0);
        assert!(gradient_central(&c).max_abs() < 1e-12);
    }

    #[test]
    fn gradient_of_sine() {
        let f = Field::from_fn(grid(0.0, std::f64::consts::PI, 401), f64::sin);
        let d = gradient_central(&f);
        let err = d
            .values()
            .iter()
            .enumerate()
            .map(|(j, v)| (v - f.grid().x(j).cos()).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-4, "err {err}");
    }

    #[test]
    fn second_derivatives() {
        let f = Field::from_fn(grid(-1.0, 1.0, 101), |x| x * x);
        let d = second_derivative(&f);
        for j in 1..100 {
            assert!((d.values()[j] - 2.0).abs() < 1e-8);
        }
        let lin = Field::from_fn(grid(-1.0, 1.0, 101), |x| 3.0 * x - 1.0);
        assert!(second_derivative(&lin).max_abs() < 1e-8);
        let e = Field::from_fn(grid(0.0, 1.0, 401), f64::exp);
        let d = second_derivative(&e);
        for j in 1..400 {
            let x = e.grid().x(j);
            assert!((d.values()[j] - x.exp()).abs() < 1e-4);
        }
    }

    #[test]
    fn trapezoid_quadratures() {
        assert!((trapezoid(&Field::from_fn(grid(0.0, 1.0, 11), |_| 1.0)) - 1.0).abs() < 1e-14);
        let pdf = Field::from_fn(grid(-8.0, 8.0, 1601), |x| normal_pdf(x, 0.0, 1.0));
        assert!((trapezoid(&pdf) - 1.0).abs() < 1e-6);
        let first = Field::from_fn(grid(-8.0, 8.0, 1601), |x| x * normal_pdf(x, 0.3, 1.0));
        assert!((trapezoid(&first) - 0.3).abs() < 1e-4);
    }

    #[test]
    fn interpolation_policy() {
        let f = Field::from_fn(grid(0.0, 1.0, 11), |x| x * x);
        let hit = interp_linear(&f, f.grid().x(3));
        assert_eq!(hit.value, f.values()[3]);
        assert!(!hit.clamped);
        let lin = Field::from_fn(grid(0.0, 1.0, 11), |x| 2.0 * x + 1.0);
        let mid = interp_linear(&lin, 0.25);
        assert!((mid.value - 0.5 * (lin.values()[2] + lin.values()[3])).abs() < 1e-14);
        let out = interp_linear(&f, 1.5);
        assert!(out.clamped);
        assert_eq!(out.value, f.values()[10]);
    }

    #[test]
    fn tridiagonal_matches_dense() {
        let lower = [0.0, -1.0, -1.0, -1.0];
        let diag = [4.0, 4.0, 4.0, 4.0];
        let upper = [-1.0, -1.0, -1.0, 0.0];
        let x = [1.0, 2.0, 3.0, 4.0];
        let mut rhs: Vec<f64> = (0..4)
            .map(|j| {
                let mut s = diag[j] * x[j];
                if j > 0 {
                    s += lower[j] * x[j - 1];
                }
                if j < 3 {
                    s += upper[j] * x[j + 1];
                }
                s
            })
            .collect();
        solve_tridiagonal(&lower, &diag, &upper, &mut rhs);
        for j in 0..4 {
            assert!((rhs[j] - x[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn bisect_finds_root_or_reports_bracket() {
        let r = bisect(|x| x * x - 2.0, 0.0, 2.0, 1e-14).unwrap();
        assert!((r - 2f64.sqrt()).abs() < 1e-12);
        assert!(matches!(
            bisect(|x| x * x + 1.0, -1.0, 1.0, 1e-12),
            Err(SolverError::RootNotBracketed { .. })
        ));
    }

    #[test]
    fn fundamental_theorem_for_smooth_field() {
        let g = grid(0.0, 2.0, 201);
        let f = Field::from_fn(g, |x| (1.3 * x).sin() + x * x);
        let lhs = trapezoid(&gradient_central(&f));
        let rhs = f.values()[200] - f.values()[0];
        let max_f2 = 1.69 + 2.0;
        assert!((lhs - rhs).abs() <= 10.0 * g.dx().powi(2) * max_f2);
    }

    proptest! {
        #[test]
        fn derivative_operators_are_linear(
            a in -5.0f64..5.0, b in -5.0f64..5.0,
            v1 in proptest::collection::vec(-10.0f64..10.0, 12),
            v2 in proptest::collection::vec(-10.0f64..10.0, 12),
        ) {
            let g = grid(-1.0, 1.0, 12);
            let f = Field::new(g, v1).unwrap();
            let h = Field::new(g, v2).unwrap();
            let combo = f.axpby(a, &h, b);
            for op in [gradient_central as fn(&Field) -> Field, second_derivative] {
                let lhs = op(&combo);
                let rhs = op(&f).axpby(a, &op(&h), b);
                let scale = 1.0 + lhs.max_abs();
                for (x, y) in lhs.values().iter().zip(rhs.values()) {
                    prop_assert!((x - y).abs() <= 1e-12 * scale);
                }
            }
        }
    }
}
