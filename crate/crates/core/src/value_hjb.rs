//! Backward value solvers in cost-minimisation form
//!
//! `V_t + min_u [f·V_x + L] + ½σ²V_xx − rV = 0`,
//!
//! with `V = Φ` on the stopped region and at the horizon. The obstacle
//! problem adds the option to stop anywhere: `V ≤ Φ`, `𝓛V + L ≥ 0` and
//! `(Φ − V)(𝓛V + L) = 0`.
//!
//! Each backward step minimises the Hamiltonian explicitly from the later
//! frame and treats diffusion and advection implicitly. Advection is
//! centred where the cell Péclet number allows and upwinded otherwise, so
//! every step matrix is an M-matrix.

use std::io::Write;

use crate::error::{Result, SolverError};
use crate::grid::{fmt_num, gradient_central, interp_values, second_derivative, solve_tridiagonal, trapezoid, Field, Grid1D, TimeGrid};
use crate::model::{ControlField, ControlForm, Feedback, ProblemSpec, StoppingBoundary};

/// Treatment of a grid end that is not in the stopped region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EndCondition {
    /// Zero curvature at the end node; advection upwinded from the inside.
    Linear,
    /// Fixed value.
    Fixed(f64),
    /// `V = Φ(t, x_end)`.
    Obstacle,
}

/// Solver settings shared by the Dirichlet and obstacle solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueConfig {
    pub left: EndCondition,
    pub right: EndCondition,
    /// PSOR relaxation factor.
    pub omega: f64,
    /// PSOR stopping threshold on the largest update, relative to `max|V|`.
    pub psor_tol: f64,
    pub psor_max_iter: usize,
    /// Relative frame change ending pseudo-time marching.
    pub stationary_tol: f64,
    pub stationary_max_steps: usize,
}

impl Default for ValueConfig {
    fn default() -> Self {
        Self {
            left: EndCondition::Linear,
            right: EndCondition::Linear,
            omega: 1.5,
            psor_tol: 1e-12,
            psor_max_iter: 50_000,
            stationary_tol: 1e-8,
            stationary_max_steps: 2_000,
        }
    }
}

impl ValueConfig {
    fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0 && self.omega < 2.0) {
            return Err(SolverError::invalid("omega", "must lie in (0, 2)"));
        }
        if !(self.psor_tol > 0.0) || self.psor_max_iter == 0 {
            return Err(SolverError::invalid("psor_tol", "tolerance and iteration cap must be positive"));
        }
        Ok(())
    }
}

/// Worst complementarity violations over a solve. `generator` is the
/// discrete `𝓛V + L` divided by the diagonal of the step matrix, so all
/// three quantities carry units of `V` (or `V²`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplementarityReport {
    pub min_generator: f64,
    pub min_gap: f64,
    pub max_product: f64,
}

impl ComplementarityReport {
    fn empty() -> Self {
        Self {
            min_generator: f64::INFINITY,
            min_gap: f64::INFINITY,
            max_product: 0.0,
        }
    }

    fn merge(&mut self, o: &ComplementarityReport) {
        self.min_generator = self.min_generator.min(o.min_generator);
        self.min_gap = self.min_gap.min(o.min_gap);
        self.max_product = self.max_product.max(o.max_product);
    }

    /// `generator ≥ −tol·s`, `gap ≥ −tol·s`, `product ≤ tol_prod·s²` with
    /// `s = max(1, scale)`.
    pub fn holds(&self, tol: f64, tol_prod: f64, scale: f64) -> bool {
        let s = scale.max(1.0);
        self.min_generator >= -tol * s && self.min_gap >= -tol * s && self.max_product <= tol_prod * s * s
    }
}

/// Value frames on a time grid, the minimising control at every node and,
/// for obstacle solves, the free boundary.
#[derive(Debug, Clone)]
pub struct ValueField {
    pub time: TimeGrid,
    pub frames: Vec<Field>,
    pub controls: Vec<Vec<f64>>,
    /// Contact-set edge per time node (obstacle solves only).
    pub free_boundary: Option<Vec<Option<f64>>>,
    pub complementarity: Option<ComplementarityReport>,
    /// Set when the frames hold a time-independent solution.
    pub stationary: bool,
}

impl ValueField {
    pub fn grid(&self) -> &Grid1D {
        self.frames[0].grid()
    }

    /// Bilinear interpolation in `(t, x)`.
    pub fn eval(&self, t: f64, x: f64) -> f64 {
        let (k, w) = self.time.locate(t);
        let g = self.grid();
        let a = interp_values(g, self.frames[k].values(), x);
        if w == 0.0 {
            return a;
        }
        let b = interp_values(g, self.frames[k + 1].values(), x);
        a + w * (b - a)
    }

    /// Frame at time `t`, linearly interpolated between nodes.
    pub fn frame_at(&self, t: f64) -> Field {
        let (k, w) = self.time.locate(t);
        if w == 0.0 {
            return self.frames[k].clone();
        }
        self.frames[k].axpby(1.0 - w, &self.frames[k + 1], w)
    }

    /// The minimising feedback as a grid control.
    pub fn feedback(&self) -> Feedback {
        let g = *self.grid();
        Feedback::grid(ControlField {
            time: self.time,
            frames: self.controls.iter().map(|u| Field::from_raw(g, u.clone())).collect(),
        })
    }

    /// CSV with header `t,x,V`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,x,V")?;
        for (k, f) in self.frames.iter().enumerate() {
            let t = fmt_num(self.time.t(k));
            for (j, v) in f.values().iter().enumerate() {
                writeln!(out, "{},{},{}", t, fmt_num(f.grid().x(j)), fmt_num(*v))?;
            }
        }
        Ok(())
    }

    /// CSV with header `t,b`; nodes without a contact edge are skipped.
    pub fn write_free_boundary_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,b")?;
        if let Some(fb) = &self.free_boundary {
            for (k, b) in fb.iter().enumerate() {
                if let Some(b) = b {
                    writeln!(out, "{},{}", fmt_num(self.time.t(k)), fmt_num(*b))?;
                }
            }
        }
        Ok(())
    }
}

/// Pointwise minimisation of `f(t,x,u)·V_x + L(t,x,u)`; the returned value
/// adds `½σ²V_xx`. Affine-quadratic specs use the closed form (clamped to
/// the control bounds), grid specs a brute-force search with ties going to
/// the lowest index.
pub fn minimize_hamiltonian(spec: &ProblemSpec, t: f64, x: f64, vx: f64, vxx: f64) -> Result<(f64, f64)> {
    if !vx.is_finite() || !vxx.is_finite() {
        return Err(SolverError::invalid("V_x", "derivatives must be finite"));
    }
    let s = spec.sigma(t);
    let diff = 0.5 * s * s * vxx;
    let h = |u: f64| spec.drift(t, x, u) * vx + spec.running_cost(t, x, u);
    let bounds = spec.control_bounds();
    let u = match spec.control_form() {
        ControlForm::Uncontrolled => 0.0,
        ControlForm::AffineQuadratic { gain, weight } => {
            let u = -gain(t, x) * vx / weight(t, x);
            match bounds {
                Some((lo, hi)) => u.clamp(lo, hi),
                None => u,
            }
        }
        ControlForm::Grid(values) => {
            let mut best: Option<(f64, f64)> = None;
            for &u in values {
                if let Some((lo, hi)) = bounds {
                    if u < lo || u > hi {
                        continue;
                    }
                }
                let v = h(u);
                if best.is_none_or(|(_, b)| v < b) {
                    best = Some((u, v));
                }
            }
            match best {
                Some((u, _)) => u,
                None => return Err(SolverError::EmptyControlGrid),
            }
        }
    };
    Ok((u, h(u) + diff))
}

/// Tridiagonal step system `A V = rhs`.
struct StepSystem {
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
    rhs: Vec<f64>,
}

impl StepSystem {
    fn residual(&self, v: &[f64], j: usize) -> f64 {
        let mut r = self.rhs[j] - self.diag[j] * v[j];
        if j > 0 {
            r -= self.lower[j] * v[j - 1];
        }
        if j + 1 < v.len() {
            r -= self.upper[j] * v[j + 1];
        }
        r
    }
}

/// Everything a backward step needs besides the later frame.
struct Stepper<'a> {
    spec: &'a ProblemSpec,
    boundary: &'a StoppingBoundary,
    grid: Grid1D,
    cfg: ValueConfig,
}

impl Stepper<'_> {
    fn controls(&self, next: &Field, t: f64) -> Result<Vec<f64>> {
        let vx = gradient_central(next);
        let vxx = second_derivative(next);
        (0..self.grid.len())
            .map(|j| minimize_hamiltonian(self.spec, t, self.grid.x(j), vx.values()[j], vxx.values()[j]).map(|(u, _)| u))
            .collect()
    }

    /// Assembles the implicit step from `next` (time `t + dt`) to `t`.
    fn assemble(&self, next: &[f64], u: &[f64], t: f64, dt: f64) -> Result<StepSystem> {
        let g = self.grid;
        let n = g.len();
        let h = g.dx();
        let s = self.spec.sigma_checked(t)?;
        let d = 0.5 * s * s;
        let r = self.spec.discount();
        let mut sys = StepSystem {
            lower: vec![0.0; n],
            diag: vec![0.0; n],
            upper: vec![0.0; n],
            rhs: vec![0.0; n],
        };
        for j in 0..n {
            let x = g.x(j);
            let phi = self.spec.terminal_cost(t, x);
            if self.boundary.level(t, x) >= 0.0 {
                sys.diag[j] = 1.0;
                sys.rhs[j] = phi;
                continue;
            }
            let end = if j == 0 {
                Some(self.cfg.left)
            } else if j == n - 1 {
                Some(self.cfg.right)
            } else {
                None
            };
            let f = self.spec.drift(t, x, u[j]);
            let l = self.spec.running_cost(t, x, u[j]);
            if !f.is_finite() || !l.is_finite() {
                return Err(SolverError::NonFiniteEvaluation { what: "drift or running cost", t, x });
            }
            match end {
                Some(EndCondition::Fixed(v)) => {
                    sys.diag[j] = 1.0;
                    sys.rhs[j] = v;
                }
                Some(EndCondition::Obstacle) => {
                    sys.diag[j] = 1.0;
                    sys.rhs[j] = phi;
                }
                Some(EndCondition::Linear) => {
                    // ghost node by linear extrapolation: V_xx = 0, one-sided V_x
                    sys.diag[j] = 1.0 / dt + r;
                    sys.rhs[j] = next[j] / dt + l;
                    if j == 0 && f > 0.0 {
                        sys.diag[j] += f / h;
                        sys.upper[j] = -f / h;
                    } else if j == n - 1 && f < 0.0 {
                        sys.diag[j] -= f / h;
                        sys.lower[j] = f / h;
                    }
                }
                None => {
                    let (lo, up) = if f.abs() * h <= 2.0 * d {
                        (d / (h * h) - f / (2.0 * h), d / (h * h) + f / (2.0 * h))
                    } else if f > 0.0 {
                        (d / (h * h), d / (h * h) + f / h)
                    } else {
                        (d / (h * h) - f / h, d / (h * h))
                    };
                    sys.lower[j] = -lo;
                    sys.upper[j] = -up;
                    sys.diag[j] = 1.0 / dt + r + lo + up;
                    sys.rhs[j] = next[j] / dt + l;
                }
            }
        }
        Ok(sys)
    }

    fn obstacle(&self, t: f64) -> Vec<f64> {
        self.grid.nodes().iter().map(|&x| self.spec.terminal_cost(t, x)).collect()
    }
}

fn check_frame(v: &[f64], t: f64) -> Result<()> {
    if let Some(j) = v.iter().position(|x| !x.is_finite() || x.abs() > 1e300) {
        return Err(SolverError::SchemeDiverged {
            t,
            detail: format!("non-finite value at node {j}"),
        });
    }
    Ok(())
}

fn solve_linear(sys: &StepSystem) -> Vec<f64> {
    let mut v = sys.rhs.clone();
    solve_tridiagonal(&sys.lower, &sys.diag, &sys.upper, &mut v);
    v
}

/// Brennan–Schwartz: eliminate in one direction, substitute back in the
/// other with projection onto `V ≤ ψ`. Exact when the contact set is a
/// single interval touching the side where substitution starts.
fn brennan_schwartz(sys: &StepSystem, psi: &[f64], from_left: bool) -> Vec<f64> {
    let n = psi.len();
    let mut d = sys.diag.clone();
    let mut r = sys.rhs.clone();
    let mut v = vec![0.0; n];
    if from_left {
        // eliminate the upper band bottom-up, substitute top-down
        for j in (0..n - 1).rev() {
            let m = sys.upper[j] / d[j + 1];
            d[j] -= m * sys.lower[j + 1];
            r[j] -= m * r[j + 1];
        }
        v[0] = (r[0] / d[0]).min(psi[0]);
        for j in 1..n {
            v[j] = ((r[j] - sys.lower[j] * v[j - 1]) / d[j]).min(psi[j]);
        }
    } else {
        for j in 1..n {
            let m = sys.lower[j] / d[j - 1];
            d[j] -= m * sys.upper[j - 1];
            r[j] -= m * r[j - 1];
        }
        v[n - 1] = (r[n - 1] / d[n - 1]).min(psi[n - 1]);
        for j in (0..n - 1).rev() {
            v[j] = ((r[j] - sys.upper[j] * v[j + 1]) / d[j]).min(psi[j]);
        }
    }
    v
}

fn complementarity(sys: &StepSystem, v: &[f64], psi: &[f64]) -> ComplementarityReport {
    let mut rep = ComplementarityReport::empty();
    for j in 0..v.len() {
        let w = sys.residual(v, j) / sys.diag[j];
        let gap = psi[j] - v[j];
        rep.merge(&ComplementarityReport {
            min_generator: w,
            min_gap: gap,
            max_product: (w * gap).abs(),
        });
    }
    rep
}

fn lcp_error(rep: &ComplementarityReport) -> f64 {
    (-rep.min_generator).max(-rep.min_gap).max(rep.max_product.sqrt()).max(0.0)
}

/// Solves `A V ≤ rhs`, `V ≤ ψ`, complementarity, by PSOR started from the
/// better of the two Brennan–Schwartz passes.
fn solve_lcp(sys: &StepSystem, psi: &[f64], cfg: &ValueConfig, t: f64) -> Result<(Vec<f64>, ComplementarityReport)> {
    let a = brennan_schwartz(sys, psi, true);
    let b = brennan_schwartz(sys, psi, false);
    let (ra, rb) = (complementarity(sys, &a, psi), complementarity(sys, &b, psi));
    let mut v = if lcp_error(&ra) <= lcp_error(&rb) { a } else { b };
    let scale = v.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    let mut iters = 0;
    loop {
        let mut change = 0.0f64;
        for j in 0..v.len() {
            let step = cfg.omega * sys.residual(&v, j) / sys.diag[j];
            let new = (v[j] + step).min(psi[j]);
            change = change.max((new - v[j]).abs());
            v[j] = new;
        }
        iters += 1;
        if change <= cfg.psor_tol * scale {
            break;
        }
        if iters >= cfg.psor_max_iter {
            let rep = complementarity(sys, &v, psi);
            let err = lcp_error(&rep);
            if err > 1e-6 * scale {
                return Err(SolverError::PsorStalled { t, residual: err, iters });
            }
            break;
        }
    }
    let rep = complementarity(sys, &v, psi);
    Ok((v, rep))
}

/// Backward sweep from `terminal` (the frame at `time.t1()`).
fn sweep(
    stepper: &Stepper<'_>,
    terminal: Field,
    time: &TimeGrid,
    obstacle: bool,
) -> Result<(Vec<Field>, Vec<Vec<f64>>, Option<ComplementarityReport>)> {
    let nt = time.nodes();
    let grid = stepper.grid;
    let mut frames = vec![Field::zeros(grid); nt];
    let mut controls = vec![Vec::new(); nt];
    let mut report = obstacle.then(ComplementarityReport::empty);
    controls[nt - 1] = stepper.controls(&terminal, time.t1())?;
    frames[nt - 1] = terminal;
    for k in (0..nt - 1).rev() {
        let t = time.t(k);
        let dt = time.t(k + 1) - t;
        let u = stepper.controls(&frames[k + 1], t)?;
        let sys = stepper.assemble(frames[k + 1].values(), &u, t, dt)?;
        let v = if obstacle {
            let (v, rep) = solve_lcp(&sys, &stepper.obstacle(t), &stepper.cfg, t)?;
            report.as_mut().unwrap().merge(&rep);
            v
        } else {
            solve_linear(&sys)
        };
        check_frame(&v, t)?;
        frames[k] = Field::from_raw(grid, v);
        controls[k] = u;
    }
    Ok((frames, controls, report))
}

/// Fixed-boundary value: `V = Φ` at the horizon and on the stopped region
/// at every time node.
pub fn solve_hjb_dirichlet(
    spec: &ProblemSpec,
    boundary: &StoppingBoundary,
    grid: &Grid1D,
    time: &TimeGrid,
    cfg: &ValueConfig,
) -> Result<ValueField> {
    let terminal = Field::from_fn(*grid, |x| spec.terminal_cost(time.t1(), x));
    solve_hjb_from(spec, boundary, terminal, time, cfg)
}

/// As [`solve_hjb_dirichlet`] but from an arbitrary frame at `time.t1()`.
pub fn solve_hjb_from(
    spec: &ProblemSpec,
    boundary: &StoppingBoundary,
    terminal: Field,
    time: &TimeGrid,
    cfg: &ValueConfig,
) -> Result<ValueField> {
    cfg.validate()?;
    boundary.validate(time)?;
    check_frame(terminal.values(), time.t1())?;
    let stepper = Stepper {
        spec,
        boundary,
        grid: *terminal.grid(),
        cfg: *cfg,
    };
    let (frames, controls, _) = sweep(&stepper, terminal, time, false)?;
    Ok(ValueField {
        time: *time,
        frames,
        controls,
        free_boundary: None,
        complementarity: None,
        stationary: false,
    })
}

/// Horizon for the obstacle problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VIMode {
    /// Finite horizon on the given time grid; `V = Φ` at the end.
    Horizon(TimeGrid),
    /// Time-independent problem solved by pseudo-time marching from `V = Φ`
    /// with steps growing geometrically from `dt0`. Coefficients are
    /// frozen at `t = 0`.
    Stationary { dt0: f64 },
}

/// Optimal-stopping value with obstacle `Φ` (the terminal cost). Nodes in
/// `forced` stop unconditionally.
pub fn solve_obstacle_vi(
    spec: &ProblemSpec,
    forced: &StoppingBoundary,
    grid: &Grid1D,
    mode: VIMode,
    cfg: &ValueConfig,
) -> Result<ValueField> {
    cfg.validate()?;
    let stepper = Stepper {
        spec,
        boundary: forced,
        grid: *grid,
        cfg: *cfg,
    };
    match mode {
        VIMode::Horizon(time) => {
            forced.validate(&time)?;
            let terminal = Field::from_fn(*grid, |x| spec.terminal_cost(time.t1(), x));
            let (frames, controls, rep) = sweep(&stepper, terminal, &time, true)?;
            let fb = frames
                .iter()
                .enumerate()
                .map(|(k, f)| free_boundary(f, &stepper.obstacle(time.t(k))))
                .collect();
            Ok(ValueField {
                time,
                frames,
                controls,
                free_boundary: Some(fb),
                complementarity: rep,
                stationary: false,
            })
        }
        VIMode::Stationary { dt0 } => {
            if !(dt0 > 0.0) {
                return Err(SolverError::invalid("dt0", "must be positive"));
            }
            let psi = stepper.obstacle(0.0);
            let mut v = psi.clone();
            let mut dt = dt0;
            let mut rep = ComplementarityReport::empty();
            let mut converged = false;
            let mut change = f64::INFINITY;
            for _ in 0..cfg.stationary_max_steps {
                let frame = Field::from_raw(*grid, v.clone());
                let u = stepper.controls(&frame, 0.0)?;
                let sys = stepper.assemble(&v, &u, 0.0, dt)?;
                let (next, r) = solve_lcp(&sys, &psi, cfg, 0.0)?;
                check_frame(&next, 0.0)?;
                let scale = next.iter().fold(1.0f64, |m, x| m.max(x.abs()));
                change = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale;
                v = next;
                rep = r;
                if change < cfg.stationary_tol {
                    converged = true;
                    break;
                }
                dt = (dt * 1.5).min(1e8);
            }
            if !converged {
                return Err(SolverError::NotConverged {
                    iters: cfg.stationary_max_steps,
                    residual: change,
                });
            }
            let frame = Field::from_raw(*grid, v);
            let u = stepper.controls(&frame, 0.0)?;
            let b = free_boundary(&frame, &psi);
            Ok(ValueField {
                time: TimeGrid::new(0.0, 1.0, 1)?,
                frames: vec![frame.clone(), frame],
                controls: vec![u.clone(), u],
                free_boundary: Some(vec![b, b]),
                complementarity: Some(rep),
                stationary: true,
            })
        }
    }
}

/// Edge of the contact set `{V = ψ}` at sub-grid resolution. Near a
/// smooth-pasting boundary the gap `ψ − V` is quadratic in the distance,
/// so its square root is extrapolated linearly from the two nearest
/// continuation nodes. The first edge from the left is reported.
pub fn free_boundary(frame: &Field, psi: &[f64]) -> Option<f64> {
    let g = frame.grid();
    let v = frame.values();
    let n = v.len();
    let gap: Vec<f64> = (0..n).map(|j| (psi[j] - v[j]).max(0.0)).collect();
    let contact: Vec<bool> = (0..n).map(|j| gap[j] <= 1e-9 * (1.0 + psi[j].abs())).collect();
    for j in 0..n - 1 {
        if contact[j] == contact[j + 1] {
            continue;
        }
        // c: last contact node, a, b: continuation nodes moving away from it
        let (c, a, b, dir) = if contact[j] {
            (j, j + 1, (j + 2).min(n - 1), 1.0)
        } else {
            (j + 1, j, j.saturating_sub(1), -1.0)
        };
        let (sa, sb) = (gap[a].sqrt(), gap[b].sqrt());
        let xc = g.x(c);
        if b == a || sb <= sa {
            return Some(0.5 * (xc + g.x(a)));
        }
        let dist = sa * g.dx() / (sb - sa);
        let x = g.x(a) - dir * dist;
        let (lo, hi) = if dir > 0.0 { (xc, g.x(a)) } else { (g.x(a), xc) };
        return Some(x.clamp(lo, hi));
    }
    None
}

/// `∫ V(t,x) μ(dx)` with `V` interpolated onto the nodes of `mu`.
pub fn distributional_value(value: &ValueField, mu: &Field, t: f64) -> f64 {
    let g = mu.grid();
    let w = Field::from_raw(
        *g,
        (0..g.len()).map(|j| value.eval(t, g.x(j)) * mu.values()[j]).collect(),
    );
    trapezoid(&w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::map2;
    use proptest::prelude::*;

    fn bm() -> ProblemSpec {
        ProblemSpec::builder("bm").sigma(1.0).terminal_cost(|_, x| x).build().unwrap()
    }

    #[test]
    fn closed_form_and_tie_break() {
        let spec = ProblemSpec::builder("q")
            .drift(|_, _, u| u)
            .running_cost(|_, _, u| 0.5 * u * u)
            .control_form(ControlForm::AffineQuadratic {
                gain: map2(|_, _| 1.0),
                weight: map2(|_, _| 1.0),
            })
            .build()
            .unwrap();
        for vx in [-2.0, 0.0, 0.3, 5.0] {
            let (u, v) = minimize_hamiltonian(&spec, 0.0, 0.0, vx, 0.0).unwrap();
            assert!((u + vx).abs() < 1e-14);
            assert!((v + 0.5 * vx * vx).abs() < 1e-12);
        }
        let flat = ProblemSpec::builder("flat")
            .drift(|_, x, _| 2.0 * x)
            .running_cost(|_, _, _| 1.5)
            .control_form(ControlForm::Grid(vec![-1.0, 0.0, 1.0]))
            .build()
            .unwrap();
        let (u, v) = minimize_hamiltonian(&flat, 0.0, 1.0, 0.5, 2.0).unwrap();
        assert_eq!(u, -1.0);
        assert!((v - (1.0 + 1.5 + 1.0)).abs() < 1e-14);
    }

    #[test]
    fn absolute_cost_matches_brute_force() {
        let grid: Vec<f64> = (-10..=10).map(|i| i as f64 * 0.2).collect();
        let spec = ProblemSpec::builder("abs")
            .drift(|_, _, u| u)
            .running_cost(|_, _, u| u.abs())
            .control_form(ControlForm::Grid(grid.clone()))
            .control_bounds(-1.0, 2.0)
            .build()
            .unwrap();
        for vx in [0.5, 1.5, -1.5, 3.0] {
            let (u, _) = minimize_hamiltonian(&spec, 0.0, 0.0, vx, 0.0).unwrap();
            let mut best = (f64::NAN, f64::INFINITY);
            for &c in grid.iter().filter(|c| (-1.0..=2.0).contains(*c)) {
                let h = c * vx + c.abs();
                if h < best.1 {
                    best = (c, h);
                }
            }
            assert_eq!(u, best.0, "vx={vx}");
        }
        let empty = ProblemSpec::builder("e")
            .control_form(ControlForm::Grid(vec![5.0]))
            .control_bounds(-1.0, 1.0)
            .build()
            .unwrap();
        assert_eq!(
            minimize_hamiltonian(&empty, 0.0, 0.0, 1.0, 0.0),
            Err(SolverError::EmptyControlGrid)
        );
        assert!(minimize_hamiltonian(&empty, 0.0, 0.0, f64::NAN, 0.0).is_err());
    }

    #[test]
    fn constant_and_linear_terminal_data() {
        let g = Grid1D::new(-4.0, 4.0, 401).unwrap();
        let time = TimeGrid::new(0.0, 1.0, 200).unwrap();
        let c = ProblemSpec::builder("c").sigma(1.0).terminal_cost(|_, _| 3.25).build().unwrap();
        let v = solve_hjb_dirichlet(&c, &StoppingBoundary::None, &g, &time, &ValueConfig::default()).unwrap();
        assert!(v.frames.iter().all(|f| f.values().iter().all(|x| (x - 3.25).abs() < 1e-8)));
        let v = solve_hjb_dirichlet(&bm(), &StoppingBoundary::None, &g, &time, &ValueConfig::default()).unwrap();
        for j in 0..g.len() {
            assert!((v.frames[0].values()[j] - g.x(j)).abs() < 2e-3);
        }
    }

    #[test]
    fn heat_equation_oracle() {
        // V = E[x_T²] = x² + σ²(T − t)
        let g = Grid1D::new(-6.0, 6.0, 601).unwrap();
        let time = TimeGrid::new(0.0, 1.0, 400).unwrap();
        let s = 0.8;
        let spec = ProblemSpec::builder("heat").sigma(s).terminal_cost(|_, x| x * x).build().unwrap();
        let v = solve_hjb_dirichlet(&spec, &StoppingBoundary::None, &g, &time, &ValueConfig::default()).unwrap();
        for j in 0..g.len() {
            let x = g.x(j);
            if x.abs() <= 3.0 {
                assert!((v.frames[0].values()[j] - x * x - s * s).abs() < 2e-3, "x={x}");
            }
        }
    }

    #[test]
    fn dirichlet_on_stopped_nodes() {
        // killed at 0: V = P(survive)·0 + ... with Φ = 1 on the boundary, 0 at horizon
        let g = Grid1D::new(-1.0, 5.0, 601).unwrap();
        let time = TimeGrid::new(0.0, 1.0, 1000).unwrap();
        let spec = ProblemSpec::builder("hit")
            .sigma(1.0)
            .terminal_cost(|_, x| if x <= 0.0 { 1.0 } else { 0.0 })
            .build()
            .unwrap();
        let b = StoppingBoundary::below_const(0.0);
        let v = solve_hjb_dirichlet(&spec, &b, &g, &time, &ValueConfig::default()).unwrap();
        // P(hit 0 before 1 | x=1) = erfc(1/√2)
        let exact = statrs::function::erf::erfc(1.0 / 2f64.sqrt());
        assert!((v.eval(0.0, 1.0) - exact).abs() < 5e-3, "{}", v.eval(0.0, 1.0));
        assert_eq!(v.eval(0.3, -0.5), 1.0);
    }

    #[test]
    fn dynamic_programming_consistency() {
        let g = Grid1D::new(-5.0, 5.0, 201).unwrap();
        let spec = ProblemSpec::builder("ou")
            .drift(|_, x, _| -x)
            .sigma(1.0)
            .terminal_cost(|_, x| x.sin())
            .running_cost(|_, x, _| 0.1 * x * x)
            .build()
            .unwrap();
        let full = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let v = solve_hjb_dirichlet(&spec, &StoppingBoundary::None, &g, &full, &ValueConfig::default()).unwrap();
        let half = TimeGrid::new(0.0, 0.5, 50).unwrap();
        let again = solve_hjb_from(&spec, &StoppingBoundary::None, v.frames[50].clone(), &half, &ValueConfig::default()).unwrap();
        for k in 0..=50 {
            let d = again.frames[k].axpby(1.0, &v.frames[k], -1.0).max_abs();
            assert!(d < 1e-10);
        }
    }

    #[test]
    fn inactive_obstacle_matches_unconstrained() {
        // continuing earns 1 per unit time: never stop early
        let g = Grid1D::new(-4.0, 4.0, 401).unwrap();
        let time = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let spec = ProblemSpec::builder("reward")
            .sigma(1.0)
            .running_cost(|_, _, _| -1.0)
            .terminal_cost(|_, x| x)
            .build()
            .unwrap();
        let cfg = ValueConfig::default();
        let free = solve_hjb_dirichlet(&spec, &StoppingBoundary::None, &g, &time, &cfg).unwrap();
        let vi = solve_obstacle_vi(&spec, &StoppingBoundary::None, &g, VIMode::Horizon(time), &cfg).unwrap();
        for k in 0..time.nodes() {
            assert!(vi.frames[k].axpby(1.0, &free.frames[k], -1.0).max_abs() < 1e-6);
        }
        assert!(vi.complementarity.unwrap().holds(1e-6, 1e-8, 4.0));
    }

    #[test]
    fn expensive_continuation_stops_immediately() {
        let g = Grid1D::new(-4.0, 4.0, 401).unwrap();
        let time = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let spec = ProblemSpec::builder("costly")
            .drift(|_, x, _| x)
            .sigma(1.0)
            .running_cost(|_, _, _| 1.0)
            .terminal_cost(|_, x| 0.5 * x.cos())
            .build()
            .unwrap();
        let cfg = ValueConfig::default();
        let vi = solve_obstacle_vi(&spec, &StoppingBoundary::None, &g, VIMode::Horizon(time), &cfg).unwrap();
        for (k, f) in vi.frames.iter().enumerate() {
            let _ = k;
            for j in 0..g.len() {
                assert!((f.values()[j] - 0.5 * g.x(j).cos()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stationary_put_in_log_price() {
        let (r, s, k) = (0.05, 0.4, 1.0);
        let spec = ProblemSpec::builder("put")
            .drift(move |_, _, _| r - 0.5 * s * s)
            .sigma(s)
            .discount(r)
            .terminal_cost(move |_, x: f64| -(k - x.exp()).max(0.0))
            .build()
            .unwrap();
        let g = Grid1D::with_spacing((0.01f64).ln(), (1e4f64).ln(), 0.01).unwrap();
        let cfg = ValueConfig {
            left: EndCondition::Obstacle,
            right: EndCondition::Fixed(0.0),
            ..ValueConfig::default()
        };
        let v = solve_obstacle_vi(&spec, &StoppingBoundary::None, &g, VIMode::Stationary { dt0: 0.01 }, &cfg).unwrap();
        let bstar = 2.0 * r * k / (2.0 * r + s * s);
        let b = v.free_boundary.as_ref().unwrap()[0].unwrap().exp();
        assert!((b - bstar).abs() / bstar < 0.01, "b={b}");
        let expo = -2.0 * r / (s * s);
        for j in 0..g.len() {
            let sp = g.x(j).exp();
            if sp > 20.0 {
                break;
            }
            let exact = if sp <= bstar { k - sp } else { (k - bstar) * (sp / bstar).powf(expo) };
            assert!((-v.frames[0].values()[j] - exact).abs() < 1e-2);
        }
        assert!(v.complementarity.unwrap().holds(1e-6, 1e-8, 1.0));
    }

    #[test]
    fn distributional_value_examples() {
        let g = Grid1D::new(-4.0, 4.0, 801).unwrap();
        let time = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let c = ProblemSpec::builder("c").sigma(1.0).terminal_cost(|_, _| 2.0).build().unwrap();
        let v = solve_hjb_dirichlet(&c, &StoppingBoundary::None, &g, &time, &ValueConfig::default()).unwrap();
        let mu = Field::from_fn(g, |x| 0.4 * (-(x * x) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt());
        assert!((distributional_value(&v, &mu, 0.0) - 2.0 * trapezoid(&mu)).abs() < 1e-10);
        let v = solve_hjb_dirichlet(&bm(), &StoppingBoundary::None, &g, &time, &ValueConfig::default()).unwrap();
        let x0 = 0.73;
        let w = 0.01;
        let spike = Field::from_fn(g, |x| (-(x - x0).powi(2) / (2.0 * w * w)).exp() / (w * (2.0 * std::f64::consts::PI).sqrt()));
        assert!((distributional_value(&v, &spike, 0.0) - v.eval(0.0, x0)).abs() < 1e-3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn raising_obstacle_never_lowers_value(bump in 0.0f64..1.0, centre in -2.0f64..2.0) {
            let g = Grid1D::new(-4.0, 4.0, 161).unwrap();
            let time = TimeGrid::new(0.0, 0.5, 25).unwrap();
            let base = |x: f64| (x - 0.3).abs() - 1.0;
            let lo = ProblemSpec::builder("lo").drift(|_, x, _| -0.5 * x).sigma(0.7)
                .running_cost(|_, x, _| 0.2 * x.cos()).terminal_cost(move |_, x| base(x)).build().unwrap();
            let hi = ProblemSpec::builder("hi").drift(|_, x, _| -0.5 * x).sigma(0.7)
                .running_cost(|_, x, _| 0.2 * x.cos())
                .terminal_cost(move |_, x| base(x) + bump * (-(x - centre).powi(2)).exp()).build().unwrap();
            let cfg = ValueConfig::default();
            let a = solve_obstacle_vi(&lo, &StoppingBoundary::None, &g, VIMode::Horizon(time), &cfg).unwrap();
            let b = solve_obstacle_vi(&hi, &StoppingBoundary::None, &g, VIMode::Horizon(time), &cfg).unwrap();
            for k in 0..time.nodes() {
                for j in 0..g.len() {
                    prop_assert!(b.frames[k].values()[j] >= a.frames[k].values()[j] - 1e-10);
                }
            }
            let c = solve_hjb_dirichlet(&lo, &StoppingBoundary::None, &g, &time, &cfg).unwrap();
            let d = solve_hjb_dirichlet(&hi, &StoppingBoundary::None, &g, &time, &cfg).unwrap();
            for j in 0..g.len() {
                prop_assert!(d.frames[0].values()[j] >= c.frames[0].values()[j] - 1e-10);
            }
        }
    }
}
