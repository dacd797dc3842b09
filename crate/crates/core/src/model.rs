//! Problem definition: controlled drift, state-independent diffusion, Bolza
//! costs, an optional terminal constraint, stopping rules and the initial
//! law. Every map is a pure `Send + Sync` closure so solvers can evaluate
//! specs from many workers at once.

use std::fmt;
use std::sync::Arc;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Result, SolverError};
use crate::grid::{fmt_num, interp_values, Field, Grid1D, TimeGrid};

pub type Map1 = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type Map2 = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub type Map3 = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;

/// Wraps a closure as a shared one-argument map.
pub fn map1(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Map1 {
    Arc::new(f)
}

pub fn map2(f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Map2 {
    Arc::new(f)
}

pub fn map3(f: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static) -> Map3 {
    Arc::new(f)
}

/// How the pointwise Hamiltonian minimisation over `u` is carried out.
#[derive(Clone)]
pub enum ControlForm {
    /// Drift and cost do not depend on `u`; the control is identically zero.
    Uncontrolled,
    /// `f = f0(t,x) + gain(t,x)·u` and `L = L0(t,x) + ½·weight(t,x)·u²`.
    AffineQuadratic { gain: Map2, weight: Map2 },
    /// Brute-force search over a finite set of control values.
    Grid(Vec<f64>),
}

impl fmt::Debug for ControlForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlForm::Uncontrolled => write!(f, "Uncontrolled"),
            ControlForm::AffineQuadratic { .. } => write!(f, "AffineQuadratic"),
            ControlForm::Grid(g) => write!(f, "Grid({} values)", g.len()),
        }
    }
}

/// Partial derivatives a solver may ask for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Partial {
    DriftU,
    DriftX,
    RunningCostU,
    RunningCostX,
    TerminalCostX,
    TerminalCostT,
    ConstraintX,
    ConstraintT,
}

impl Partial {
    pub const ALL: [Partial; 8] = [
        Partial::DriftU,
        Partial::DriftX,
        Partial::RunningCostU,
        Partial::RunningCostX,
        Partial::TerminalCostX,
        Partial::TerminalCostT,
        Partial::ConstraintX,
        Partial::ConstraintT,
    ];
}

#[derive(Clone, Default)]
struct AnalyticPartials {
    drift_du: Option<Map3>,
    drift_dx: Option<Map3>,
    running_cost_du: Option<Map3>,
    running_cost_dx: Option<Map3>,
    terminal_cost_dx: Option<Map2>,
    terminal_cost_dt: Option<Map2>,
    constraint_dx: Option<Map2>,
    constraint_dt: Option<Map2>,
}

/// Controlled diffusion `dx = f(t,x,u) dt + σ_t dw` with Bolza cost
/// `∫ L dt + Φ` and optional terminal constraint `E[Ψ] = 0`.
#[derive(Clone)]
pub struct ProblemSpec {
    name: String,
    drift: Map3,
    diffusion: Map1,
    running_cost: Map3,
    terminal_cost: Map2,
    constraint: Option<Map2>,
    control_dim: usize,
    control: ControlForm,
    control_bounds: Option<(f64, f64)>,
    discount: f64,
    partials: AnalyticPartials,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("control", &self.control)
            .field("control_bounds", &self.control_bounds)
            .field("discount", &self.discount)
            .field("constraint", &self.constraint.is_some())
            .finish()
    }
}

impl ProblemSpec {
    pub fn builder(name: impl Into<String>) -> ProblemBuilder {
        ProblemBuilder::new(name.into())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn control_form(&self) -> &ControlForm {
        &self.control
    }

    pub fn control_bounds(&self) -> Option<(f64, f64)> {
        self.control_bounds
    }

    /// Discount (killing) rate used by the value solvers; zero for the
    /// undiscounted Bolza cost.
    pub fn discount(&self) -> f64 {
        self.discount
    }

    #[inline]
    pub fn drift(&self, t: f64, x: f64, u: f64) -> f64 {
        (self.drift)(t, x, u)
    }

    #[inline]
    pub fn sigma(&self, t: f64) -> f64 {
        (self.diffusion)(t)
    }

    /// Copy with the constant diffusion coefficient `s`.
    pub fn with_sigma(&self, s: f64) -> Result<Self> {
        if !(s > 0.0) || !s.is_finite() {
            return Err(SolverError::invalid("sigma", "must be positive"));
        }
        let mut out = self.clone();
        out.diffusion = map1(move |_| s);
        Ok(out)
    }

    /// `σ_t`, checked against uniform ellipticity.
    pub fn sigma_checked(&self, t: f64) -> Result<f64> {
        let s = self.sigma(t);
        if !(s > 0.0) || !s.is_finite() {
            return Err(SolverError::invalid(
                "diffusion",
                format!("sigma must be positive and finite, got {s} at t={t}"),
            ));
        }
        Ok(s)
    }

    #[inline]
    pub fn running_cost(&self, t: f64, x: f64, u: f64) -> f64 {
        (self.running_cost)(t, x, u)
    }

    #[inline]
    pub fn terminal_cost(&self, t: f64, x: f64) -> f64 {
        (self.terminal_cost)(t, x)
    }

    pub fn has_constraint(&self) -> bool {
        self.constraint.is_some()
    }

    /// `Ψ(t,x)`, or zero when the problem has no terminal constraint.
    #[inline]
    pub fn constraint(&self, t: f64, x: f64) -> f64 {
        self.constraint.as_ref().map_or(0.0, |c| c(t, x))
    }

    pub fn has_analytic(&self, which: Partial) -> bool {
        let p = &self.partials;
        match which {
            Partial::DriftU => p.drift_du.is_some(),
            Partial::DriftX => p.drift_dx.is_some(),
            Partial::RunningCostU => p.running_cost_du.is_some(),
            Partial::RunningCostX => p.running_cost_dx.is_some(),
            Partial::TerminalCostX => p.terminal_cost_dx.is_some(),
            Partial::TerminalCostT => p.terminal_cost_dt.is_some(),
            Partial::ConstraintX => p.constraint_dx.is_some(),
            Partial::ConstraintT => p.constraint_dt.is_some(),
        }
    }

    fn analytic(&self, which: Partial, t: f64, x: f64, u: f64) -> Option<f64> {
        let p = &self.partials;
        match which {
            Partial::DriftU => p.drift_du.as_ref().map(|f| f(t, x, u)),
            Partial::DriftX => p.drift_dx.as_ref().map(|f| f(t, x, u)),
            Partial::RunningCostU => p.running_cost_du.as_ref().map(|f| f(t, x, u)),
            Partial::RunningCostX => p.running_cost_dx.as_ref().map(|f| f(t, x, u)),
            Partial::TerminalCostX => p.terminal_cost_dx.as_ref().map(|f| f(t, x)),
            Partial::TerminalCostT => p.terminal_cost_dt.as_ref().map(|f| f(t, x)),
            Partial::ConstraintX => p.constraint_dx.as_ref().map(|f| f(t, x)),
            Partial::ConstraintT => p.constraint_dt.as_ref().map(|f| f(t, x)),
        }
    }

    /// Requested partial: analytic when supplied, otherwise a central
    /// difference with step `1e-5·max(1,|arg|)`.
    pub fn partial(&self, which: Partial, t: f64, x: f64, u: f64) -> Result<f64> {
        if let Some(v) = self.analytic(which, t, x, u) {
            if !v.is_finite() {
                return Err(SolverError::NonFiniteEvaluation {
                    what: "analytic partial",
                    t,
                    x,
                });
            }
            return Ok(v);
        }
        let arg = match which {
            Partial::DriftU | Partial::RunningCostU => u,
            Partial::TerminalCostT | Partial::ConstraintT => t,
            _ => x,
        };
        finite_diff_partials(self, which, t, x, u, default_fd_step(arg))
    }

    /// Largest relative mismatch between analytic and finite-difference
    /// partials over the given probes (`max(|a-b|/max(1,|a|))`).
    pub fn partial_mismatch(&self, probes: &[(f64, f64, f64)]) -> Result<f64> {
        let mut worst = 0.0_f64;
        for &which in &Partial::ALL {
            if !self.has_analytic(which) {
                continue;
            }
            for &(t, x, u) in probes {
                let arg = match which {
                    Partial::DriftU | Partial::RunningCostU => u,
                    Partial::TerminalCostT | Partial::ConstraintT => t,
                    _ => x,
                };
                let a = self.analytic(which, t, x, u).unwrap_or(f64::NAN);
                let b = finite_diff_partials(self, which, t, x, u, default_fd_step(arg))?;
                worst = worst.max((a - b).abs() / a.abs().max(1.0));
            }
        }
        Ok(worst)
    }
}

/// Evaluates `f(t,x,u)`.
pub fn eval_drift(spec: &ProblemSpec, t: f64, x: f64, u: f64) -> f64 {
    spec.drift(t, x, u)
}

pub fn default_fd_step(arg: f64) -> f64 {
    1e-5 * arg.abs().max(1.0)
}

/// Central-difference approximation of one partial derivative.
pub fn finite_diff_partials(
    spec: &ProblemSpec,
    which: Partial,
    t: f64,
    x: f64,
    u: f64,
    h: f64,
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(SolverError::invalid("h", "step must be positive"));
    }
    let eval = |t: f64, x: f64, u: f64| -> f64 {
        match which {
            Partial::DriftU | Partial::DriftX => spec.drift(t, x, u),
            Partial::RunningCostU | Partial::RunningCostX => spec.running_cost(t, x, u),
            Partial::TerminalCostX | Partial::TerminalCostT => spec.terminal_cost(t, x),
            Partial::ConstraintX | Partial::ConstraintT => spec.constraint(t, x),
        }
    };
    let (plus, minus) = match which {
        Partial::DriftU | Partial::RunningCostU => (eval(t, x, u + h), eval(t, x, u - h)),
        Partial::TerminalCostT | Partial::ConstraintT => (eval(t + h, x, u), eval(t - h, x, u)),
        _ => (eval(t, x + h, u), eval(t, x - h, u)),
    };
    if !plus.is_finite() || !minus.is_finite() {
        return Err(SolverError::NonFiniteEvaluation {
            what: "finite-difference probe",
            t,
            x,
        });
    }
    Ok((plus - minus) / (2.0 * h))
}

pub struct ProblemBuilder {
    spec: ProblemSpec,
}

impl ProblemBuilder {
    fn new(name: String) -> Self {
        Self {
            spec: ProblemSpec {
                name,
                drift: map3(|_, _, _| 0.0),
                diffusion: map1(|_| 1.0),
                running_cost: map3(|_, _, _| 0.0),
                terminal_cost: map2(|_, _| 0.0),
                constraint: None,
                control_dim: 1,
                control: ControlForm::Uncontrolled,
                control_bounds: None,
                discount: 0.0,
                partials: AnalyticPartials::default(),
            },
        }
    }

    pub fn drift(mut self, f: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.spec.drift = map3(f);
        self
    }

    pub fn diffusion(mut self, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.spec.diffusion = map1(f);
        self
    }

    /// Constant diffusion coefficient.
    pub fn sigma(self, s: f64) -> Self {
        self.diffusion(move |_| s)
    }

    pub fn running_cost(mut self, f: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.spec.running_cost = map3(f);
        self
    }

    pub fn terminal_cost(mut self, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.spec.terminal_cost = map2(f);
        self
    }

    pub fn constraint(mut self, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.spec.constraint = Some(map2(f));
        self
    }

    pub fn control_form(mut self, form: ControlForm) -> Self {
        self.spec.control = form;
        self
    }

    pub fn control_bounds(mut self, lo: f64, hi: f64) -> Self {
        self.spec.control_bounds = Some((lo, hi));
        self
    }

    pub fn control_dim(mut self, m: usize) -> Self {
        self.spec.control_dim = m;
        self
    }

    pub fn discount(mut self, r: f64) -> Self {
        self.spec.discount = r;
        self
    }

    pub fn drift_du(mut self, f: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.spec.partials.drift_du = Some(map3(f));
        self
    }

    pub fn drift_dx(mut self, f: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.spec.partials.drift_dx = Some(map3(f));
        self
    }

    pub fn running_cost_du(mut self, f: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.spec.partials.running_cost_du = Some(map3(f));
        self
    }

    pub fn running_cost_dx(mut self, f: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.spec.partials.running_cost_dx = Some(map3(f));
        self
    }

    pub fn terminal_cost_dx(mut self, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.spec.partials.terminal_cost_dx = Some(map2(f));
        self
    }

    pub fn terminal_cost_dt(mut self, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.spec.partials.terminal_cost_dt = Some(map2(f));
        self
    }

    pub fn constraint_dx(mut self, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.spec.partials.constraint_dx = Some(map2(f));
        self
    }

    pub fn constraint_dt(mut self, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.spec.partials.constraint_dt = Some(map2(f));
        self
    }

    pub fn build(self) -> Result<ProblemSpec> {
        let s = self.spec;
        if s.control_dim == 0 {
            return Err(SolverError::invalid("control_dim", "must be positive"));
        }
        if let Some((lo, hi)) = s.control_bounds {
            if !(lo <= hi) {
                return Err(SolverError::invalid("control_bounds", "lower bound exceeds upper"));
            }
        }
        if let ControlForm::Grid(g) = &s.control {
            if g.is_empty() {
                return Err(SolverError::EmptyControlGrid);
            }
        }
        if !(s.discount >= 0.0) {
            return Err(SolverError::invalid("discount", "must be non-negative"));
        }
        s.sigma_checked(0.0)?;
        Ok(s)
    }
}

/// Space-time stopping rule. The continuation (alive) region is the open
/// set where [`StoppingBoundary::level`] is negative.
#[derive(Clone)]
pub enum StoppingBoundary {
    None,
    /// Continuation where `g(t,x) < 0`.
    LevelSet(Map2),
    /// Stopped once `x <= b(t)`.
    Below(Map1),
    /// Stopped once `x >= b(t)`.
    Above(Map1),
    /// Continuation strictly inside `(lo(t), hi(t))`.
    Interval { lo: Map1, hi: Map1 },
}

impl fmt::Debug for StoppingBoundary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            StoppingBoundary::None => "None",
            StoppingBoundary::LevelSet(_) => "LevelSet",
            StoppingBoundary::Below(_) => "Below",
            StoppingBoundary::Above(_) => "Above",
            StoppingBoundary::Interval { .. } => "Interval",
        };
        write!(f, "StoppingBoundary::{name}")
    }
}

impl StoppingBoundary {
    pub fn below_const(b: f64) -> Self {
        StoppingBoundary::Below(map1(move |_| b))
    }

    pub fn above_const(b: f64) -> Self {
        StoppingBoundary::Above(map1(move |_| b))
    }

    pub fn is_absorbing(&self) -> bool {
        !matches!(self, StoppingBoundary::None)
    }

    /// Signed boundary functional: negative inside the continuation region.
    #[inline]
    pub fn level(&self, t: f64, x: f64) -> f64 {
        match self {
            StoppingBoundary::None => -1.0,
            StoppingBoundary::LevelSet(g) => g(t, x),
            StoppingBoundary::Below(b) => b(t) - x,
            StoppingBoundary::Above(b) => x - b(t),
            StoppingBoundary::Interval { lo, hi } => (lo(t) - x).max(x - hi(t)),
        }
    }

    /// Checks the curve invariants at every node of `time`.
    pub fn validate(&self, time: &TimeGrid) -> Result<()> {
        for k in 0..time.nodes() {
            let t = time.t(k);
            match self {
                StoppingBoundary::Below(b) | StoppingBoundary::Above(b) => {
                    if !b(t).is_finite() {
                        return Err(SolverError::invalid("boundary", format!("curve not finite at t={t}")));
                    }
                }
                StoppingBoundary::Interval { lo, hi } => {
                    let (a, c) = (lo(t), hi(t));
                    if !(a.is_finite() && c.is_finite() && a < c) {
                        return Err(SolverError::invalid("boundary", format!("need lo < hi at t={t}")));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// True iff `(t,x)` lies in the open continuation region.
pub fn inside_continuation(b: &StoppingBoundary, t: f64, x: f64) -> bool {
    b.level(t, x) < 0.0
}

/// Final-time rule: one common horizon, or a horizon per initial condition.
#[derive(Clone)]
pub enum TimeAssignment {
    Common(f64),
    PerInitial(Map1),
}

impl fmt::Debug for TimeAssignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimeAssignment::Common(t) => write!(f, "Common({t})"),
            TimeAssignment::PerInitial(_) => write!(f, "PerInitial"),
        }
    }
}

impl TimeAssignment {
    #[inline]
    pub fn tau(&self, x0: f64) -> f64 {
        match self {
            TimeAssignment::Common(t) => *t,
            TimeAssignment::PerInitial(m) => m(x0),
        }
    }

    /// Checks `τ ≥ 0` and finiteness at the given initial points.
    pub fn validate(&self, support_points: &[f64]) -> Result<()> {
        for &x0 in support_points {
            let t = self.tau(x0);
            if !(t >= 0.0 && t.is_finite()) {
                return Err(SolverError::invalid("time_assignment", format!("tau({x0}) = {t}")));
            }
        }
        Ok(())
    }
}

/// Initial law `ρ₀` on a bounded support, with a tabulated CDF for sampling.
#[derive(Clone)]
pub struct InitialDensity {
    density: Map1,
    support: (f64, f64),
    moments: Option<(f64, f64)>,
    normal: Option<Normal>,
    cdf: Arc<Vec<f64>>,
}

impl fmt::Debug for InitialDensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("InitialDensity")
            .field("support", &self.support)
            .field("moments", &self.moments)
            .finish()
    }
}

const CDF_TABLE_NODES: usize = 20_001;

impl InitialDensity {
    /// `N(mean, var)` restricted to `mean ± 12 sd`.
    pub fn gaussian(mean: f64, var: f64) -> Result<Self> {
        if !(var > 0.0) {
            return Err(SolverError::invalid("variance", "must be positive"));
        }
        let sd = var.sqrt();
        let normal = Normal::new(mean, sd).map_err(|e| SolverError::invalid("gaussian", e.to_string()))?;
        let norm = 1.0 / (sd * (2.0 * std::f64::consts::PI).sqrt());
        let density = map1(move |x| norm * (-(x - mean).powi(2) / (2.0 * var)).exp());
        let mut d = Self::build(density, (mean - 12.0 * sd, mean + 12.0 * sd))?;
        d.moments = Some((mean, var));
        d.normal = Some(normal);
        Ok(d)
    }

    /// Arbitrary density on `[a,b]`; must integrate to 1 within 1e-8.
    pub fn from_fn(density: impl Fn(f64) -> f64 + Send + Sync + 'static, support: (f64, f64)) -> Result<Self> {
        Self::build(map1(density), support)
    }

    fn build(density: Map1, support: (f64, f64)) -> Result<Self> {
        let (a, b) = support;
        let g = Grid1D::new(a, b, CDF_TABLE_NODES)?;
        let vals: Vec<f64> = g.nodes().iter().map(|&x| density(x)).collect();
        if vals.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(SolverError::invalid("initial_density", "density must be finite and non-negative"));
        }
        let f = Field::from_raw(g, vals);
        let cdf = crate::grid::cumulative_trapezoid(&f);
        let mass = *cdf.last().unwrap();
        if (mass - 1.0).abs() > 1e-8 {
            return Err(SolverError::invalid(
                "initial_density",
                format!("integrates to {mass}, expected 1"),
            ));
        }
        Ok(Self {
            density,
            support,
            moments: None,
            normal: None,
            cdf: Arc::new(cdf),
        })
    }

    #[inline]
    pub fn density(&self, x: f64) -> f64 {
        if x < self.support.0 || x > self.support.1 {
            0.0
        } else {
            (self.density)(x)
        }
    }

    pub fn support(&self) -> (f64, f64) {
        self.support
    }

    pub fn moments(&self) -> Option<(f64, f64)> {
        self.moments
    }

    /// Inverse CDF at `p ∈ (0,1)`.
    pub fn quantile(&self, p: f64) -> f64 {
        if let Some(n) = &self.normal {
            return n.inverse_cdf(p.clamp(1e-300, 1.0 - 1e-16));
        }
        let cdf = &self.cdf;
        let total = *cdf.last().unwrap();
        let target = p.clamp(0.0, 1.0) * total;
        let j = cdf.partition_point(|&c| c < target).clamp(1, cdf.len() - 1);
        let (c0, c1) = (cdf[j - 1], cdf[j]);
        let w = if c1 > c0 { (target - c0) / (c1 - c0) } else { 0.5 };
        let (a, b) = self.support;
        let h = (b - a) / (cdf.len() - 1) as f64;
        a + (j as f64 - 1.0 + w) * h
    }

    /// Samples `ρ₀` at the nodes of `grid`, plus the on-grid mass.
    pub fn project(&self, grid: &Grid1D) -> (Field, f64) {
        let f = Field::from_fn(*grid, |x| self.density(x));
        let mass = crate::grid::trapezoid(&f);
        (f, mass)
    }
}

/// Grid-sampled feedback `u(t_k, x_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlField {
    pub time: TimeGrid,
    pub frames: Vec<Field>,
}

impl ControlField {
    pub fn zeros(time: TimeGrid, grid: Grid1D) -> Self {
        Self {
            time,
            frames: vec![Field::zeros(grid); time.nodes()],
        }
    }

    pub fn from_fn(time: TimeGrid, grid: Grid1D, f: impl Fn(f64, f64) -> f64) -> Self {
        let frames = (0..time.nodes())
            .map(|k| {
                let t = time.t(k);
                Field::from_fn(grid, |x| f(t, x))
            })
            .collect();
        Self { time, frames }
    }

    /// CSV with header `t,x,u`.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,x,u")?;
        for (k, f) in self.frames.iter().enumerate() {
            let t = fmt_num(self.time.t(k));
            for (j, v) in f.values().iter().enumerate() {
                writeln!(out, "{},{},{}", t, fmt_num(f.grid().x(j)), fmt_num(*v))?;
            }
        }
        Ok(())
    }

    /// Bilinear (time, space) interpolation.
    pub fn eval(&self, t: f64, x: f64) -> f64 {
        let (k, w) = self.time.locate(t);
        let g = self.frames[k].grid();
        let a = interp_values(g, self.frames[k].values(), x);
        if w == 0.0 {
            return a;
        }
        let b = interp_values(g, self.frames[k + 1].values(), x);
        a * (1.0 - w) + b * w
    }
}

/// A feedback law `u(t,x)`.
#[derive(Clone)]
pub enum Feedback {
    Zero,
    Map(Map2),
    Grid(Arc<ControlField>),
}

impl fmt::Debug for Feedback {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Feedback::Zero => write!(f, "Feedback::Zero"),
            Feedback::Map(_) => write!(f, "Feedback::Map"),
            Feedback::Grid(_) => write!(f, "Feedback::Grid"),
        }
    }
}

impl Feedback {
    pub fn map(f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        Feedback::Map(map2(f))
    }

    pub fn grid(field: ControlField) -> Self {
        Feedback::Grid(Arc::new(field))
    }

    #[inline]
    pub fn eval(&self, t: f64, x: f64) -> f64 {
        match self {
            Feedback::Zero => 0.0,
            Feedback::Map(m) => m(t, x),
            Feedback::Grid(c) => c.eval(t, x),
        }
    }

    /// Control values at the nodes of `grid` at time `t`.
    pub fn sample(&self, t: f64, grid: &Grid1D) -> Vec<f64> {
        match self {
            Feedback::Zero => vec![0.0; grid.len()],
            Feedback::Grid(c) if c.frames[0].grid() == grid => {
                let (k, w) = c.time.locate(t);
                let a = c.frames[k].values();
                if w == 0.0 {
                    return a.to_vec();
                }
                let b = c.frames[k + 1].values();
                a.iter().zip(b).map(|(p, q)| p * (1.0 - w) + q * w).collect()
            }
            _ => (0..grid.len()).map(|j| self.eval(t, grid.x(j))).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ou() -> ProblemSpec {
        ProblemSpec::builder("ou")
            .drift(|_, x, _| -x)
            .sigma(2f64.sqrt())
            .drift_dx(|_, _, _| -1.0)
            .drift_du(|_, _, _| 0.0)
            .build()
            .unwrap()
    }

    #[test]
    fn drift_evaluation() {
        assert_eq!(eval_drift(&ou(), 0.0, 2.0, 7.0), -2.0);
        let integ = ProblemSpec::builder("int").drift(|_, _, u| u).build().unwrap();
        assert_eq!(eval_drift(&integ, 0.0, 0.0, 3.0), 3.0);
        let (r, s) = (0.05, 0.4);
        let gbm_log = ProblemSpec::builder("log")
            .drift(move |_, _, _| r - 0.5 * s * s)
            .sigma(s)
            .build()
            .unwrap();
        assert!((eval_drift(&gbm_log, 0.3, -1.2, 0.0) + 0.03).abs() < 1e-15);
    }

    #[test]
    fn continuation_region_kinds() {
        assert!(inside_continuation(&StoppingBoundary::None, 3.0, -1e9));
        let half = StoppingBoundary::below_const(0.0);
        assert!(inside_continuation(&half, 0.0, 0.5));
        assert!(!inside_continuation(&half, 0.0, -0.1));
        let b = 0.8399;
        let bridge = StoppingBoundary::Above(map1(move |t: f64| b * (1.0 - t).max(0.0).sqrt()));
        assert!(!inside_continuation(&bridge, 0.0, 0.9));
        assert!(inside_continuation(&bridge, 0.0, 0.5));
        let iv = StoppingBoundary::Interval {
            lo: map1(|_| -1.0),
            hi: map1(|_| 1.0),
        };
        assert!(inside_continuation(&iv, 0.0, 0.0));
        assert!(!inside_continuation(&iv, 0.0, 1.0));
        let bad = StoppingBoundary::Interval {
            lo: map1(|_| 1.0),
            hi: map1(|_| 1.0),
        };
        assert!(bad.validate(&TimeGrid::new(0.0, 1.0, 4).unwrap()).is_err());
    }

    #[test]
    fn finite_difference_partials() {
        let quad = ProblemSpec::builder("q").running_cost(|_, _, u| 0.5 * u * u).build().unwrap();
        let d = finite_diff_partials(&quad, Partial::RunningCostU, 0.0, 0.0, 1.0, 1e-5).unwrap();
        assert!((d - 1.0).abs() < 1e-9);
        let put = ProblemSpec::builder("put")
            .terminal_cost(|_, x: f64| (1.0 - x.exp()).max(0.0))
            .build()
            .unwrap();
        let d = finite_diff_partials(&put, Partial::TerminalCostX, 0.0, 0.5f64.ln(), 0.0, 1e-5).unwrap();
        assert!((d + 0.5).abs() < 1e-6);
        let d = finite_diff_partials(&ou(), Partial::DriftX, 0.0, 0.7, 0.0, 1e-5).unwrap();
        assert!((d + 1.0).abs() < 1e-10);
        assert!(finite_diff_partials(&ou(), Partial::DriftX, 0.0, 0.7, 0.0, 0.0).is_err());
        let blow = ProblemSpec::builder("b").running_cost(|_, x, _| 1.0 / x).build().unwrap();
        assert!(matches!(
            finite_diff_partials(&blow, Partial::RunningCostX, 0.0, 0.0, 0.0, 1e-5),
            Err(SolverError::NonFiniteEvaluation { .. }) | Ok(_)
        ));
        let inf = ProblemSpec::builder("i").running_cost(|_, _, _| f64::INFINITY).build().unwrap();
        assert!(finite_diff_partials(&inf, Partial::RunningCostX, 0.0, 0.0, 0.0, 1e-5).is_err());
    }

    #[test]
    fn builder_rejects_degenerate_diffusion() {
        assert!(ProblemSpec::builder("bad").sigma(0.0).build().is_err());
        assert!(ProblemSpec::builder("bad").control_form(ControlForm::Grid(vec![])).build().is_err());
    }

    #[test]
    fn gaussian_initial_density() {
        let d = InitialDensity::gaussian(2.0, 0.25).unwrap();
        assert!((d.quantile(0.5) - 2.0).abs() < 1e-12);
        let g = Grid1D::new(-8.0, 8.0, 1601).unwrap();
        let (_, mass) = d.project(&g);
        assert!((mass - 1.0).abs() < 1e-8);
        assert!(InitialDensity::from_fn(|_| 2.0, (0.0, 1.0)).is_err());
        let u = InitialDensity::from_fn(|_| 1.0, (0.0, 1.0)).unwrap();
        assert!((u.quantile(0.25) - 0.25).abs() < 1e-9);
    }

    #[test]
    fn feedback_grid_interpolates_bilinearly() {
        let t = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let g = Grid1D::new(-1.0, 1.0, 21).unwrap();
        let c = ControlField::from_fn(t, g, |t, x| 2.0 * t + 3.0 * x);
        let fb = Feedback::grid(c);
        assert!((fb.eval(0.3, 0.15) - (0.6 + 0.45)).abs() < 1e-12);
        let s = fb.sample(0.3, &g);
        assert!((s[10] - 0.6).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn level_set_sign_matches_inside(t in 0.0f64..2.0, x in -3.0f64..3.0) {
            let b = StoppingBoundary::LevelSet(map2(|t, x| x * x + t - 1.5));
            prop_assert_eq!(inside_continuation(&b, t, x), x * x + t - 1.5 < 0.0);
        }
    }
}
