//! First-order optimality system with free stopping time, as residual
//! evaluators, and a forward–backward sweep driving the residuals to zero.
//!
//! * OS1: `∂ᵤL + λ ∂ᵤf = 0`
//! * OS2: along the characteristics of `f̃`,
//!   `dλ/dt = −[∂ₓL + λ∂ₓf + (σ²/2)λ_xx + (σ²/2)λ_x ∂ₓlog ρ]`
//! * OS3: `λ = ∂ₓΦ − η∂ₓΨ` wherever a trajectory stops
//! * OS4: `E[Ψ(τ, x_τ)] = 0`
//! * OS5: `H̃ + ∂ₜΦ − η∂ₜΨ = 0` at the stopping point, with
//!   `H̃ = λf + L + (σ²/2)λ_x`; CS is its expectation for a common `τ`.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Result, SolverError};
use crate::fokker_planck::{solve_fp, DensityPath};
use crate::grid::{
    bisect, fmt_num, gradient_central, interp_cubic, interp_values, second_derivative, solve_tridiagonal,
    trapezoid_values, Field, Grid1D, TimeGrid,
};
use crate::model::{
    map1, ControlField, ControlForm, Feedback, InitialDensity, Map1, Partial, ProblemSpec, StoppingBoundary,
    TimeAssignment,
};
use crate::transform::{
    advect_particles, score_path, velocity_field, ParticleEnsemble, ScoreConfig, ScoreField, StopRule, VelocityField,
};

/// Costate frames `λ(t_k, ·)`.
#[derive(Debug, Clone)]
pub struct CostateField {
    pub time: TimeGrid,
    pub frames: Vec<Field>,
}

impl CostateField {
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
        a + w * (interp_values(g, self.frames[k + 1].values(), x) - a)
    }

    /// CSV with header `t,x,lambda`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,x,lambda")?;
        for (k, f) in self.frames.iter().enumerate() {
            let t = fmt_num(self.time.t(k));
            for (j, v) in f.values().iter().enumerate() {
                writeln!(out, "{},{},{}", t, fmt_num(f.grid().x(j)), fmt_num(*v))?;
            }
        }
        Ok(())
    }
}

/// Multiplier of the terminal distribution constraint.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Multiplier {
    pub eta: f64,
}

/// `H̃ = λf + L + (σ²/2)λ_x`.
pub fn modified_hamiltonian(spec: &ProblemSpec, t: f64, x: f64, u: f64, lam: f64, lam_x: f64) -> f64 {
    let s = spec.sigma(t);
    lam * spec.drift(t, x, u) + spec.running_cost(t, x, u) + 0.5 * s * s * lam_x
}

/// OS3: `∂ₓΦ − η∂ₓΨ` at `(τ, x)`.
pub fn terminal_costate(spec: &ProblemSpec, eta: f64, tau: f64, x: f64) -> Result<f64> {
    let phi_x = spec.partial(Partial::TerminalCostX, tau, x, 0.0)?;
    if !spec.has_constraint() || eta == 0.0 {
        return Ok(phi_x);
    }
    Ok(phi_x - eta * spec.partial(Partial::ConstraintX, tau, x, 0.0)?)
}

/// OS5 residual `H̃ + ∂ₜΦ − η∂ₜΨ` at a stopping point.
pub fn stopping_residual(
    spec: &ProblemSpec,
    t: f64,
    x: f64,
    u: f64,
    lam: f64,
    lam_x: f64,
    eta: f64,
) -> Result<f64> {
    let mut r = modified_hamiltonian(spec, t, x, u, lam, lam_x) + spec.partial(Partial::TerminalCostT, t, x, u)?;
    if spec.has_constraint() && eta != 0.0 {
        r -= eta * spec.partial(Partial::ConstraintT, t, x, u)?;
    }
    Ok(r)
}

/// Time discretisation along the characteristics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeScheme {
    /// Weight `θ` on the new (earlier) time level; ½ is trapezoidal.
    Theta(f64),
    /// Two-step backward differentiation.
    Bdf2,
}

/// Time-stepping options of [`costate_sweep`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostateConfig {
    pub scheme: TimeScheme,
    /// Fully implicit steps right after the terminal frame.
    pub implicit_start: usize,
    /// Use one-step implicit Euler at nodes next to the stopping boundary.
    pub implicit_near_boundary: bool,
}

impl Default for CostateConfig {
    fn default() -> Self {
        Self {
            scheme: TimeScheme::Bdf2,
            implicit_start: 1,
            implicit_near_boundary: false,
        }
    }
}

/// Nodes where `λ` is prescribed at time `t`, and for the others the
/// three-point stencil to their neighbours, which may be a boundary point
/// between nodes.
struct Geometry {
    fixed: Vec<Option<f64>>,
    /// `(left offset, left value)` / `(right offset, right value)` in units
    /// of `h`; `None` means the regular neighbour node.
    near: Vec<(Option<(f64, f64)>, Option<(f64, f64)>)>,
}

impl Geometry {
    fn touches_boundary(&self, j: usize) -> bool {
        self.near[j].0.is_some() || self.near[j].1.is_some()
    }
}

const MIN_OFFSET: f64 = 1e-3;

fn geometry(spec: &ProblemSpec, boundary: &StoppingBoundary, grid: &Grid1D, t: f64, eta: f64) -> Result<Geometry> {
    let n = grid.len();
    let h = grid.dx();
    let level = |x: f64| boundary.level(t, x);
    let stopped: Vec<bool> = (0..n).map(|j| level(grid.x(j)) >= 0.0).collect();
    let mut fixed = vec![None; n];
    let mut near = vec![(None, None); n];
    if !boundary.is_absorbing() {
        return Ok(Geometry { fixed, near });
    }
    let crossing = |a: f64, b: f64| -> f64 {
        // level(a) < 0 <= level(b)
        bisect(level, a, b, 1e-14 * h.max(1.0)).unwrap_or(b)
    };
    for j in 0..n {
        if stopped[j] {
            fixed[j] = Some(terminal_costate(spec, eta, t, grid.x(j))?);
        }
    }
    // continuation nodes hugging the boundary are pinned to it
    let mut edge = vec![(None, None); n];
    for j in 0..n {
        if stopped[j] {
            continue;
        }
        let x = grid.x(j);
        if j + 1 < n && stopped[j + 1] {
            let b = crossing(x, grid.x(j + 1));
            edge[j].1 = Some(b);
        }
        if j >= 1 && stopped[j - 1] {
            let b = crossing(x, grid.x(j - 1));
            edge[j].0 = Some(b);
        }
        let close = |b: Option<f64>| b.is_some_and(|b: f64| (b - x).abs() < MIN_OFFSET * h);
        if close(edge[j].0) || close(edge[j].1) {
            fixed[j] = Some(terminal_costate(spec, eta, t, x)?);
        }
    }
    for j in 0..n {
        if fixed[j].is_some() {
            continue;
        }
        let x = grid.x(j);
        if j >= 1 && fixed[j - 1].is_some() {
            near[j].0 = Some(match edge[j].0 {
                Some(b) if stopped[j - 1] => ((x - b) / h, terminal_costate(spec, eta, t, b)?),
                _ => (1.0, fixed[j - 1].unwrap()),
            });
        }
        if j + 1 < n && fixed[j + 1].is_some() {
            near[j].1 = Some(match edge[j].1 {
                Some(b) if stopped[j + 1] => ((b - x) / h, terminal_costate(spec, eta, t, b)?),
                _ => (1.0, fixed[j + 1].unwrap()),
            });
        }
    }
    Ok(Geometry { fixed, near })
}

/// First- and second-derivative weights at `0` for the points
/// `−a·h, 0, b·h`.
fn stencil(a: f64, b: f64, h: f64) -> ([f64; 3], [f64; 3]) {
    let (pm, pp) = (-a * h, b * h);
    let d1 = [-pp / (pm * (pm - pp)), -(pm + pp) / (pm * pp), -pm / (pp * (pp - pm))];
    let d2 = [2.0 / (pm * (pm - pp)), 2.0 / (pm * pp), 2.0 / (pp * (pp - pm))];
    (d1, d2)
}

/// Interpolates a frame at `x` without reading across the stopping
/// boundary: near it, the cubic runs through the boundary point and the
/// continuation nodes on the same side.
fn interp_continuation(grid: &Grid1D, v: &[f64], geo: &Geometry, x: f64) -> f64 {
    let n = grid.len();
    let h = grid.dx();
    let i = (((x - grid.x_min()) / h).floor().max(0.0) as usize).min(n - 2);
    let lo = i.saturating_sub(1);
    let hi = (i + 2).min(n - 1);
    if (lo..=hi).all(|m| geo.fixed[m].is_none()) {
        return interp_cubic(grid, v, x);
    }
    let Some(j) = (lo..=hi)
        .filter(|&m| geo.fixed[m].is_none())
        .min_by(|&a, &b| (grid.x(a) - x).abs().total_cmp(&(grid.x(b) - x).abs()))
    else {
        return interp_values(grid, v, x);
    };
    // contiguous continuation run around j, clipped to four nodes
    let (mut a, mut b) = (j, j);
    while b - a + 1 < 4 {
        let left = a > 0 && geo.fixed[a - 1].is_none();
        let right = b + 1 < n && geo.fixed[b + 1].is_none();
        let go_left = match (left, right) {
            (true, true) => (x - grid.x(a - 1)).abs() <= (grid.x(b + 1) - x).abs(),
            (l, _) => l,
        };
        if go_left {
            a -= 1;
        } else if right {
            b += 1;
        } else {
            break;
        }
    }
    let mut pts: Vec<(f64, f64)> = (a..=b).map(|m| (grid.x(m), v[m])).collect();
    if let Some((off, val)) = geo.near[a].0 {
        pts.insert(0, (grid.x(a) - off * h, val));
    }
    if let Some((off, val)) = geo.near[b].1 {
        pts.push((grid.x(b) + off * h, val));
    }
    // keep the four points nearest to x
    while pts.len() > 4 {
        let first = (pts[0].0 - x).abs();
        let last = (pts[pts.len() - 1].0 - x).abs();
        if first > last {
            pts.remove(0);
        } else {
            pts.pop();
        }
    }
    lagrange(&pts, x)
}

fn lagrange(pts: &[(f64, f64)], x: f64) -> f64 {
    let mut acc = 0.0;
    for (i, &(xi, yi)) in pts.iter().enumerate() {
        let mut w = 1.0;
        for (m, &(xm, _)) in pts.iter().enumerate() {
            if m != i {
                w *= (x - xm) / (xi - xm);
            }
        }
        acc += w * yi;
    }
    acc
}

/// Boundary-aware `λ_x`, `λ_xx` of a frame.
fn frame_derivatives(frame: &Field, geo: &Geometry) -> (Vec<f64>, Vec<f64>) {
    let g = frame.grid();
    let h = g.dx();
    let v = frame.values();
    let mut dx = gradient_central(frame).into_values();
    let mut dxx = second_derivative(frame).into_values();
    for j in 1..v.len() - 1 {
        if geo.fixed[j].is_some() || !geo.touches_boundary(j) {
            continue;
        }
        let (a, lv) = geo.near[j].0.unwrap_or((1.0, v[j - 1]));
        let (b, rv) = geo.near[j].1.unwrap_or((1.0, v[j + 1]));
        let (d1, d2) = stencil(a, b, h);
        dx[j] = d1[0] * lv + d1[1] * v[j] + d1[2] * rv;
        dxx[j] = d2[0] * lv + d2[1] * v[j] + d2[2] * rv;
    }
    (dx, dxx)
}

/// Per-node `∂ₓf` and `∂ₓL` at time `t` under control values `u`.
fn x_partials(spec: &ProblemSpec, grid: &Grid1D, t: f64, u: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let pairs: Vec<(f64, f64)> = (0..grid.len())
        .into_par_iter()
        .map(|j| {
            let x = grid.x(j);
            Ok((
                spec.partial(Partial::DriftX, t, x, u[j])?,
                spec.partial(Partial::RunningCostX, t, x, u[j])?,
            ))
        })
        .collect::<Result<_>>()?;
    Ok(pairs.into_iter().unzip())
}

/// Backward semi-Lagrangian sweep of OS2. The foot of each characteristic
/// of `f̃` is found with a midpoint step; `λ` there is interpolated with
/// cubics. The default scheme is BDF2 along the characteristics (two feet,
/// at one and two steps back); a `θ`-weighted one-step scheme is
/// available. The diffusion, score and `∂ₓf` terms at the new level are
/// implicit. OS3 is imposed at the horizon
/// and on the stopped region, located at sub-grid resolution.
pub fn costate_sweep(
    spec: &ProblemSpec,
    feedback: &Feedback,
    path: &DensityPath,
    scores: &[ScoreField],
    boundary: &StoppingBoundary,
    eta: f64,
    cfg: &CostateConfig,
) -> Result<CostateField> {
    let vel = velocity_field(spec, feedback, path, scores);
    costate_sweep_with(spec, feedback, path, scores, &vel, boundary, eta, cfg)
}

#[allow(clippy::too_many_arguments)]
fn costate_sweep_with(
    spec: &ProblemSpec,
    feedback: &Feedback,
    path: &DensityPath,
    scores: &[ScoreField],
    vel: &VelocityField,
    boundary: &StoppingBoundary,
    eta: f64,
    cfg: &CostateConfig,
) -> Result<CostateField> {
    if let TimeScheme::Theta(th) = cfg.scheme {
        if !(0.0..=1.0).contains(&th) {
            return Err(SolverError::invalid("theta", "must lie in [0, 1]"));
        }
    }
    let grid = *path.grid();
    let time = path.time;
    let n = grid.len();
    let nt = time.nodes();
    let h = grid.dx();
    let t_end = time.t1();

    let terminal: Vec<f64> = (0..n)
        .map(|j| terminal_costate(spec, eta, t_end, grid.x(j)))
        .collect::<Result<_>>()?;
    let mut frames = vec![Field::zeros(grid); nt];
    frames[nt - 1] = Field::from_raw(grid, terminal);

    let mut geo_next = geometry(spec, boundary, &grid, t_end, eta)?;
    let mut geo_after: Option<Geometry> = None;
    for k in (0..nt - 1).rev() {
        let t0 = time.t(k);
        let t1 = time.t(k + 1);
        let dt = t1 - t0;
        let start = nt - 2 - k < cfg.implicit_start.max(1);
        let scheme = if start { TimeScheme::Theta(1.0) } else { cfg.scheme };
        let next = &frames[k + 1];
        let after = frames.get(k + 2);
        let (nx, nxx) = frame_derivatives(next, &geo_next);
        let s1 = spec.sigma(t1);
        let d1 = 0.5 * s1 * s1;
        let s0 = spec.sigma_checked(t0)?;
        let d0 = 0.5 * s0 * s0;
        let geo = geometry(spec, boundary, &grid, t0, eta)?;
        let u0 = feedback.sample(t0, &grid);
        let (fx0, lx0) = x_partials(spec, &grid, t0, &u0)?;
        let score0 = &scores[k].values;
        let score1 = &scores[k + 1].values;

        // explicit part along the characteristic
        let explicit: Vec<(f64, f64)> = (0..n)
            .into_par_iter()
            .map(|j| {
                if geo.fixed[j].is_some() {
                    return Ok((0.0, 1.0));
                }
                let x = grid.x(j);
                let scheme = if cfg.implicit_near_boundary && geo.touches_boundary(j) {
                    TimeScheme::Theta(1.0)
                } else {
                    scheme
                };
                let v1 = vel.eval(t0, x);
                let v2 = vel.eval(t0 + 0.5 * dt, x + 0.5 * dt * v1);
                let foot = (x + dt * v2).clamp(grid.x_min(), grid.x_max());
                let lam = interp_continuation(&grid, next.values(), &geo_next, foot);
                match scheme {
                    TimeScheme::Bdf2 => {
                        let w1 = vel.eval(t1, foot);
                        let w2 = vel.eval(t1 + 0.5 * dt, foot + 0.5 * dt * w1);
                        let foot2 = (foot + dt * w2).clamp(grid.x_min(), grid.x_max());
                        let lam2 = interp_continuation(&grid, after.unwrap().values(), geo_after.as_ref().unwrap(), foot2);
                        let c = 2.0 * dt / 3.0;
                        Ok(((4.0 * lam - lam2) / 3.0 + c * lx0[j], c))
                    }
                    TimeScheme::Theta(th) => {
                        let mut e = lam + th * dt * lx0[j];
                        if th < 1.0 {
                            let uf = feedback.eval(t1, foot);
                            let fx = spec.partial(Partial::DriftX, t1, foot, uf)?;
                            let lx = spec.partial(Partial::RunningCostX, t1, foot, uf)?;
                            let lam_x = interp_values(&grid, &nx, foot);
                            let lam_xx = interp_values(&grid, &nxx, foot);
                            let s = interp_values(&grid, score1, foot);
                            e += (1.0 - th) * dt * (d1 * lam_xx + d1 * s * lam_x + fx * lam + lx);
                        }
                        Ok((e, th * dt))
                    }
                }
            })
            .collect::<Result<_>>()?;

        let mut lower = vec![0.0; n];
        let mut diag = vec![1.0; n];
        let mut upper = vec![0.0; n];
        let mut rhs = vec![0.0; n];
        for j in 0..n {
            if let Some(v) = geo.fixed[j] {
                rhs[j] = v;
                continue;
            }
            let (e, c) = explicit[j];
            rhs[j] = e;
            if j == 0 || j == n - 1 {
                diag[j] = 1.0 - c * fx0[j];
                continue;
            }
            let (a, la) = geo.near[j].0.map_or((1.0, None), |(a, v)| (a, Some(v)));
            let (b, rb) = geo.near[j].1.map_or((1.0, None), |(b, v)| (b, Some(v)));
            let (w1, w2) = stencil(a, b, h);
            let s = score0[j];
            let coef = |i: usize| d0 * w2[i] + d0 * s * w1[i];
            diag[j] = 1.0 - c * (coef(1) + fx0[j]);
            match la {
                Some(v) => rhs[j] += c * coef(0) * v,
                None => lower[j] = -c * coef(0),
            }
            match rb {
                Some(v) => rhs[j] += c * coef(2) * v,
                None => upper[j] = -c * coef(2),
            }
        }
        solve_tridiagonal(&lower, &diag, &upper, &mut rhs);
        if let Some(j) = rhs.iter().position(|v| !v.is_finite() || v.abs() > 1e12) {
            return Err(SolverError::SchemeDiverged {
                t: t0,
                detail: format!("costate {} at x={}", rhs[j], grid.x(j)),
            });
        }
        frames[k] = Field::from_raw(grid, rhs);
        geo_after = Some(std::mem::replace(&mut geo_next, geo));
    }
    Ok(CostateField { time, frames })
}

/// OS1 residual `∂ᵤL + λ∂ᵤf` per time node.
pub fn stationarity_residual(spec: &ProblemSpec, feedback: &Feedback, costate: &CostateField) -> Result<Vec<Field>> {
    let grid = *costate.grid();
    if matches!(spec.control_form(), ControlForm::Uncontrolled) {
        return Ok(vec![Field::zeros(grid); costate.time.nodes()]);
    }
    (0..costate.time.nodes())
        .into_par_iter()
        .map(|k| {
            let t = costate.time.t(k);
            let u = feedback.sample(t, &grid);
            let lam = costate.frames[k].values();
            let v = (0..grid.len())
                .map(|j| {
                    let x = grid.x(j);
                    Ok(spec.partial(Partial::RunningCostU, t, x, u[j])? + lam[j] * spec.partial(Partial::DriftU, t, x, u[j])?)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(Field::from_raw(grid, v))
        })
        .collect()
}

/// Largest `|r|` over nodes carrying density above `rel·max ρ` at that time.
pub fn max_on_support(residual: &[Field], path: &DensityPath, rel: f64) -> f64 {
    residual
        .iter()
        .zip(&path.frames)
        .map(|(r, rho)| {
            let cut = rel * rho.max();
            r.values()
                .iter()
                .zip(rho.values())
                .filter(|(_, p)| **p > cut)
                .map(|(v, _)| v.abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

/// Density-weighted mean of `|R|`, where `R` is the OS2 residual of `λ` under
/// an Eulerian discretisation centred in time and space (independent of the
/// sweep's semi-Lagrangian stepping). Nodes whose stencil touches the
/// stopped region or the grid ends are left out.
pub fn os2_defect(
    spec: &ProblemSpec,
    feedback: &Feedback,
    path: &DensityPath,
    scores: &[ScoreField],
    vel: &VelocityField,
    costate: &CostateField,
    boundary: &StoppingBoundary,
) -> Result<f64> {
    let grid = *path.grid();
    let time = path.time;
    let n = grid.len();
    let h = grid.dx();
    let level_ok = |t: f64, j: usize| boundary.level(t, grid.x(j)) < 0.0;
    let operator = |k: usize| -> Result<Vec<f64>> {
        let t = time.t(k);
        let lam = &costate.frames[k];
        let lx = gradient_central(lam);
        let lxx = second_derivative(lam);
        let u = feedback.sample(t, &grid);
        let (fx, lxc) = x_partials(spec, &grid, t, &u)?;
        let s = spec.sigma(t);
        let d = 0.5 * s * s;
        let sc = &scores[k].values;
        let ft = vel.frames[k].values();
        Ok((0..n)
            .map(|j| {
                let (l, l1, l2) = (lam.values()[j], lx.values()[j], lxx.values()[j]);
                ft[j] * l1 + d * l2 + d * sc[j] * l1 + fx[j] * l + lxc[j]
            })
            .collect())
    };
    let mut num = 0.0;
    let mut den = 0.0;
    let mut prev = operator(0)?;
    for k in 0..time.steps() {
        let next = operator(k + 1)?;
        let (ta, tb) = (time.t(k), time.t(k + 1));
        let dt = tb - ta;
        let (ra, rb) = (path.frames[k].values(), path.frames[k + 1].values());
        let (la, lb) = (costate.frames[k].values(), costate.frames[k + 1].values());
        for j in 1..n - 1 {
            let ok = (j - 1..=j + 1).all(|i| level_ok(ta, i) && level_ok(tb, i));
            if !ok {
                continue;
            }
            let r = (lb[j] - la[j]) / dt + 0.5 * (prev[j] + next[j]);
            let w = 0.5 * (ra[j] + rb[j]) * h * dt;
            num += r.abs() * w;
            den += w;
        }
        prev = next;
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

/// OS4 from particles: `(1/N) Σ Ψ(τᵢ, xᵢ)` with `τᵢ` the stop time, or the
/// ensemble time for particles still alive.
pub fn constraint_residual(spec: &ProblemSpec, ens: &ParticleEnsemble) -> f64 {
    if !spec.has_constraint() || ens.is_empty() {
        return 0.0;
    }
    let vals: Vec<f64> = (0..ens.len())
        .map(|i| {
            let t = if ens.alive[i] { ens.time } else { ens.stop_time[i] };
            spec.constraint(t, ens.positions[i])
        })
        .collect();
    crate::grid::pairwise_sum(&vals) / ens.len() as f64
}

/// `E[g(τ, x_τ)]` from a density path: alive mass at the horizon plus the
/// exit flux and swept mass along the way.
fn path_expectation(path: &DensityPath, g: impl Fn(f64, f64) -> f64) -> f64 {
    let grid = *path.grid();
    let last = path.frames.last().unwrap();
    let t_end = path.time.t1();
    let vals: Vec<f64> = (0..grid.len()).map(|j| g(t_end, grid.x(j)) * last.values()[j]).collect();
    let mut acc = trapezoid_values(&vals, grid.dx());
    let exit_rate = |k: usize| -> f64 {
        let rec = &path.exit_flux[k];
        rec.exits.iter().map(|(x, r)| g(rec.t, *x) * r).sum()
    };
    for k in 0..path.time.steps() {
        let dt = path.time.t(k + 1) - path.time.t(k);
        acc += 0.5 * dt * (exit_rate(k) + exit_rate(k + 1));
        let rec = &path.exit_flux[k + 1];
        acc += rec.snapped.iter().map(|(x, m)| g(rec.t, *x) * m).sum::<f64>();
    }
    acc
}

/// OS4 from the density path.
pub fn constraint_residual_path(spec: &ProblemSpec, path: &DensityPath) -> f64 {
    if !spec.has_constraint() {
        return 0.0;
    }
    path_expectation(path, |t, x| spec.constraint(t, x))
}

/// Augmented objective `E[∫e^{−rt}L dt + e^{−rτ}Φ] − η E[Ψ]` on a density path.
pub fn augmented_objective(spec: &ProblemSpec, feedback: &Feedback, path: &DensityPath, eta: f64) -> f64 {
    let grid = *path.grid();
    let r = spec.discount();
    let t0 = path.time.t0();
    let disc = |t: f64| if r == 0.0 { 1.0 } else { (-r * (t - t0)).exp() };
    let running: Vec<f64> = (0..path.time.nodes())
        .map(|k| {
            let t = path.time.t(k);
            let u = feedback.sample(t, &grid);
            let rho = path.frames[k].values();
            let v: Vec<f64> = (0..grid.len()).map(|j| spec.running_cost(t, grid.x(j), u[j]) * rho[j]).collect();
            disc(t) * trapezoid_values(&v, grid.dx())
        })
        .collect();
    let mut j = 0.0;
    for k in 0..path.time.steps() {
        j += 0.5 * (path.time.t(k + 1) - path.time.t(k)) * (running[k] + running[k + 1]);
    }
    j += path_expectation(path, |t, x| disc(t) * spec.terminal_cost(t, x));
    if spec.has_constraint() && eta != 0.0 {
        j -= eta * constraint_residual_path(spec, path);
    }
    j
}

/// CS: `(1/N) Σ [H̃ + ∂ₜΦ − η∂ₜΨ](τ, xᵢ(τ))` over particles alive at the
/// common time `τ = ens.time`, with `λ`, `λ_x` from the costate at `τ`.
pub fn common_stopping_residual(
    spec: &ProblemSpec,
    feedback: &Feedback,
    costate: &CostateField,
    ens: &ParticleEnsemble,
    eta: f64,
) -> Result<f64> {
    if ens.is_empty() {
        return Err(SolverError::EmptyInput("common_stopping_residual"));
    }
    let tau = ens.time;
    let k = costate.time.nearest(tau);
    let frame = &costate.frames[k];
    let grad = gradient_central(frame);
    let grid = *frame.grid();
    let vals: Vec<f64> = (0..ens.len())
        .filter(|&i| ens.alive[i])
        .map(|i| {
            let x = ens.positions[i];
            let lam = interp_values(&grid, frame.values(), x);
            let lam_x = interp_values(&grid, grad.values(), x);
            stopping_residual(spec, tau, x, feedback.eval(tau, x), lam, lam_x, eta)
        })
        .collect::<Result<_>>()?;
    Ok(crate::grid::pairwise_sum(&vals) / ens.len() as f64)
}

/// Which side of `b(t)` is the stopped region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundarySide {
    /// Stopped when `x ≥ b(t)`.
    Above,
    /// Stopped when `x ≤ b(t)`.
    Below,
}

impl BoundarySide {
    pub fn boundary(self, b: Map1) -> StoppingBoundary {
        match self {
            BoundarySide::Above => StoppingBoundary::Above(b),
            BoundarySide::Below => StoppingBoundary::Below(b),
        }
    }
}

/// OS5 along a boundary curve `b(t)` at the costate's time nodes inside
/// `window`. `λ` on the curve comes from OS3 and `λ_x` from the quadratic
/// through the curve point and the two nearest continuation nodes.
pub fn boundary_stopping_profile(
    spec: &ProblemSpec,
    feedback: &Feedback,
    costate: &CostateField,
    b: &dyn Fn(f64) -> f64,
    side: BoundarySide,
    eta: f64,
    window: (f64, f64),
) -> Result<Vec<(f64, f64)>> {
    let grid = *costate.grid();
    let h = grid.dx();
    let mut out = Vec::new();
    for k in 0..costate.time.nodes() {
        let t = costate.time.t(k);
        if t < window.0 - 1e-12 || t > window.1 + 1e-12 {
            continue;
        }
        let bt = b(t);
        let lam_b = terminal_costate(spec, eta, t, bt)?;
        let v = costate.frames[k].values();
        let s = (bt - grid.x_min()) / h;
        let (j1, j2) = match side {
            BoundarySide::Above => {
                let mut j = s.ceil() as isize - 1;
                if bt - grid.x(j.max(0) as usize) < 0.5 * h {
                    j -= 1;
                }
                (j, j - 1)
            }
            BoundarySide::Below => {
                let mut j = s.floor() as isize + 1;
                if (grid.x(j.min(grid.len() as isize - 1) as usize) - bt) < 0.5 * h {
                    j += 1;
                }
                (j, j + 1)
            }
        };
        let inside = |j: isize| j >= 0 && (j as usize) < grid.len();
        if !inside(j1) || !inside(j2) {
            continue;
        }
        let (p1, p2) = (grid.x(j1 as usize), grid.x(j2 as usize));
        let (y1, y2) = (v[j1 as usize], v[j2 as usize]);
        let p0 = bt;
        let lam_x = lam_b * (2.0 * p0 - p1 - p2) / ((p0 - p1) * (p0 - p2))
            + y1 * (p0 - p2) / ((p1 - p0) * (p1 - p2))
            + y2 * (p0 - p1) / ((p2 - p0) * (p2 - p1));
        let u = feedback.eval(t, bt);
        out.push((t, stopping_residual(spec, t, bt, u, lam_b, lam_x, eta)?));
    }
    Ok(out)
}

/// Stopping-time handling in [`fb_sweep`].
#[derive(Clone)]
pub enum TimeMode {
    /// `τ` is the end of the time grid (plus any fixed stopping boundary).
    FixedHorizon,
    /// One `τ` for all trajectories, chosen by secant steps on CS.
    CommonTime { lo: f64, hi: f64, initial: f64 },
    /// Stopping boundary `c·shape(t)` with the scale `c` chosen by secant
    /// steps on the mean OS5 residual over `window`.
    BoundaryScale {
        shape: Map1,
        side: BoundarySide,
        initial: f64,
        window: (f64, f64),
    },
}

/// Sweep settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepConfig {
    /// Relaxation `u ← (1−γ)u + γ u_new`.
    pub damping: f64,
    /// Cap on forward–backward passes, summed over outer updates.
    pub max_iters: usize,
    pub tol: f64,
    /// First two multiplier guesses of the secant.
    pub eta_init: (f64, f64),
    /// Passes with an unchanged multiplier before it is updated regardless.
    pub eta_patience: usize,
    pub max_outer: usize,
    /// Particles for the CS expectation.
    pub particles: usize,
    /// Density cut-off (relative) for the OS1 maximum.
    pub support_rel: f64,
    pub score: ScoreConfig,
    pub costate: CostateConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            damping: 0.5,
            max_iters: 200,
            tol: 1e-3,
            eta_init: (0.0, 0.1),
            eta_patience: 25,
            max_outer: 30,
            particles: 4000,
            support_rel: 1e-6,
            score: ScoreConfig::default(),
            costate: CostateConfig::default(),
        }
    }
}

/// One line of the residual history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualRecord {
    pub iter: usize,
    pub os1: f64,
    pub os2: f64,
    pub os4: f64,
    pub os5: f64,
    pub objective: f64,
}

/// Problem handed to [`fb_sweep`].
#[derive(Clone)]
pub struct SweepProblem<'a> {
    pub spec: &'a ProblemSpec,
    pub rho0: &'a InitialDensity,
    pub grid: Grid1D,
    /// Time grid; in common-time mode only its step is used.
    pub time: TimeGrid,
    pub boundary: StoppingBoundary,
}

/// Final iterate and diagnostics of [`fb_sweep`].
#[derive(Debug, Clone)]
pub struct SweepState {
    pub controls: ControlField,
    pub costate: CostateField,
    pub multiplier: Multiplier,
    pub assignment: TimeAssignment,
    pub boundary_scale: Option<f64>,
    pub path: DensityPath,
    pub history: Vec<ResidualRecord>,
    pub converged: bool,
    /// Passes where the objective rose by more than 1e-6 at a fixed multiplier.
    pub flagged: Vec<usize>,
    /// Final OS2 defect.
    pub os2: f64,
    /// Final OS1 maximum on the support.
    pub os1: f64,
    /// Final OS4 residual.
    pub os4: f64,
    /// Final OS5 or CS residual (zero in fixed-horizon mode).
    pub os5: f64,
}

impl std::fmt::Debug for TimeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TimeMode::FixedHorizon => write!(f, "FixedHorizon"),
            TimeMode::CommonTime { lo, hi, initial } => write!(f, "CommonTime({lo}, {hi}, {initial})"),
            TimeMode::BoundaryScale { side, initial, .. } => write!(f, "BoundaryScale({side:?}, {initial})"),
        }
    }
}

impl SweepState {
    pub fn feedback(&self) -> Feedback {
        Feedback::grid(self.controls.clone())
    }

    pub fn iterations(&self) -> usize {
        self.history.len()
    }

    /// `Err(NotConverged)` unless the sweep met its tolerance.
    pub fn ensure_converged(&self) -> Result<()> {
        if self.converged {
            return Ok(());
        }
        let residual = self.os1.max(self.os2).max(self.os4.abs()).max(self.os5.abs());
        Err(SolverError::NotConverged {
            iters: self.history.len(),
            residual,
        })
    }

    /// CSV with header `iter,r_os1,r_os2,r_os4,r_os5,objective`.
    pub fn write_history_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "iter,r_os1,r_os2,r_os4,r_os5,objective")?;
        for r in &self.history {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.iter,
                fmt_num(r.os1),
                fmt_num(r.os2),
                fmt_num(r.os4),
                fmt_num(r.os5),
                fmt_num(r.objective)
            )?;
        }
        Ok(())
    }
}

struct Inner {
    controls: ControlField,
    costate: CostateField,
    eta: f64,
    path: DensityPath,
    scores: Vec<ScoreField>,
    vel: VelocityField,
    converged: bool,
    os1: f64,
    os2: f64,
    os4: f64,
}

/// Control minimising `λf + L` at one node.
fn control_update(spec: &ProblemSpec, t: f64, x: f64, lam: f64) -> Result<f64> {
    // the pointwise minimiser of λf + L is the Hamiltonian minimiser with V_x = λ
    crate::value_hjb::minimize_hamiltonian(spec, t, x, lam, 0.0).map(|(u, _)| u)
}

struct Bookkeeping<'h> {
    history: &'h mut Vec<ResidualRecord>,
    flagged: &'h mut Vec<usize>,
    os5: f64,
}

fn sweep_fixed(
    prob: &SweepProblem<'_>,
    time: TimeGrid,
    boundary: &StoppingBoundary,
    cfg: &SweepConfig,
    init: Option<&ControlField>,
    eta_start: Option<f64>,
    book: &mut Bookkeeping<'_>,
) -> Result<Inner> {
    let spec = prob.spec;
    let grid = prob.grid;
    let mut u = match init {
        Some(c) => ControlField::from_fn(time, grid, |t, x| c.eval(t, x)),
        None => ControlField::zeros(time, grid),
    };
    let constrained = spec.has_constraint();
    let mut eta = eta_start.unwrap_or(cfg.eta_init.0);
    let mut eta_prev: Option<(f64, f64)> = None;
    let mut since_eta = 0usize;
    let mut last_obj: Option<f64> = None;
    loop {
        let fb = Feedback::grid(u.clone());
        let path = solve_fp(spec, &fb, prob.rho0, &grid, &time, boundary)?;
        let scores = score_path(&path, boundary, &cfg.score)?;
        let vel = velocity_field(spec, &fb, &path, &scores);
        let costate = costate_sweep_with(spec, &fb, &path, &scores, &vel, boundary, eta, &cfg.costate)?;
        let os1 = max_on_support(&stationarity_residual(spec, &fb, &costate)?, &path, cfg.support_rel);
        let os2 = os2_defect(spec, &fb, &path, &scores, &vel, &costate, boundary)?;
        let os4 = constraint_residual_path(spec, &path);
        let objective = augmented_objective(spec, &fb, &path, eta);
        let iter = book.history.len();
        book.history.push(ResidualRecord {
            iter,
            os1,
            os2,
            os4,
            os5: book.os5,
            objective,
        });
        if let Some(prev) = last_obj {
            if objective > prev + 1e-6 {
                book.flagged.push(iter);
            }
        }
        last_obj = Some(objective);
        since_eta += 1;
        let converged = os1 < cfg.tol && os2 < cfg.tol && os4.abs() < cfg.tol;
        let out_of_budget = book.history.len() >= cfg.max_iters;
        let frozen = matches!(spec.control_form(), ControlForm::Uncontrolled) && !constrained;
        if converged || out_of_budget || frozen {
            return Ok(Inner {
                controls: u,
                costate,
                eta,
                path,
                scores,
                vel,
                converged,
                os1,
                os2,
                os4,
            });
        }
        let settled = os1 < 0.1 * cfg.tol || since_eta >= cfg.eta_patience;
        if constrained && settled && os4.abs() >= cfg.tol {
            let next = match eta_prev {
                None => {
                    if eta == cfg.eta_init.1 {
                        cfg.eta_init.0
                    } else {
                        cfg.eta_init.1
                    }
                }
                Some((ep, cp)) => {
                    let slope = (os4 - cp) / (eta - ep);
                    if slope.is_finite() && slope.abs() > 1e-14 {
                        eta - os4 / slope
                    } else {
                        eta + (cfg.eta_init.1 - cfg.eta_init.0)
                    }
                }
            };
            eta_prev = Some((eta, os4));
            eta = next;
            since_eta = 0;
            last_obj = None;
            continue;
        }
        // control update from OS1, relaxed
        let gamma = cfg.damping;
        let frames: Vec<Field> = (0..time.nodes())
            .into_par_iter()
            .map(|k| {
                let t = time.t(k);
                let lam = costate.frames[k].values();
                let old = u.frames[k].values();
                let v = (0..grid.len())
                    .map(|j| Ok((1.0 - gamma) * old[j] + gamma * control_update(spec, t, grid.x(j), lam[j])?))
                    .collect::<Result<Vec<f64>>>()?;
                Ok(Field::from_raw(grid, v))
            })
            .collect::<Result<_>>()?;
        u = ControlField { time, frames };
    }
}

/// Secant iteration `x ← x − r(x)(x − x_prev)/(r(x) − r(x_prev))` clamped
/// to `[lo, hi]`.
fn secant_step(x: f64, r: f64, xp: f64, rp: f64, lo: f64, hi: f64) -> f64 {
    let slope = (r - rp) / (x - xp);
    let next = if slope.is_finite() && slope != 0.0 {
        x - r / slope
    } else {
        x + 0.1 * (hi - lo)
    };
    next.clamp(lo, hi)
}

/// Forward–backward sweep: forward density and score, backward costate,
/// relaxed control update from OS1, multiplier secant on OS4, and the
/// stopping update selected by `mode`. Returns the final state even when
/// the tolerance was not met (see [`SweepState::ensure_converged`]).
pub fn fb_sweep(prob: &SweepProblem<'_>, mode: &TimeMode, cfg: &SweepConfig) -> Result<SweepState> {
    if !(cfg.damping > 0.0 && cfg.damping <= 1.0) {
        return Err(SolverError::invalid("damping", "must lie in (0, 1]"));
    }
    if !(cfg.tol > 0.0) || cfg.max_iters == 0 {
        return Err(SolverError::invalid("tol", "tolerance and iteration cap must be positive"));
    }
    let mut history = Vec::new();
    let mut flagged = Vec::new();
    match mode {
        TimeMode::FixedHorizon => {
            let mut book = Bookkeeping {
                history: &mut history,
                flagged: &mut flagged,
                os5: 0.0,
            };
            let inner = sweep_fixed(prob, prob.time, &prob.boundary, cfg, None, None, &mut book)?;
            Ok(finish(inner, TimeAssignment::Common(prob.time.t1()), None, 0.0, true, history, flagged))
        }
        TimeMode::CommonTime { lo, hi, initial } => {
            let (lo, hi) = (*lo, *hi);
            if !(lo > prob.time.t0() && hi > lo && (lo..=hi).contains(initial)) {
                return Err(SolverError::invalid("common time", "need t0 < lo <= initial <= hi"));
            }
            let dt = prob.time.dt();
            let eval = |tau: f64,
                        init: Option<&ControlField>,
                        eta: Option<f64>,
                        os5: f64,
                        history: &mut Vec<ResidualRecord>,
                        flagged: &mut Vec<usize>|
             -> Result<(Inner, f64)> {
                let time = TimeGrid::with_step(prob.time.t0(), tau, dt)?;
                let mut book = Bookkeeping { history, flagged, os5 };
                let inner = sweep_fixed(prob, time, &prob.boundary, cfg, init, eta, &mut book)?;
                let cs = cs_of(prob, &inner, cfg, time)?;
                Ok((inner, cs))
            };
            let mut tau = *initial;
            let (mut inner, mut cs) = eval(tau, None, None, 0.0, &mut history, &mut flagged)?;
            tau = inner.path.time.t1();
            let mut prev: Option<(f64, f64)> = None;
            let mut outer = 0;
            while cs.abs() >= cfg.tol && outer < cfg.max_outer && history.len() < cfg.max_iters {
                let next = match prev {
                    None => {
                        let step = (0.05 * (hi - lo)).max(10.0 * dt);
                        if tau + step <= hi {
                            tau + step
                        } else {
                            tau - step
                        }
                    }
                    Some((tp, cp)) => secant_step(tau, cs, tp, cp, lo, hi),
                };
                if (next - tau).abs() < 0.5 * dt {
                    break;
                }
                prev = Some((tau, cs));
                let res = eval(next, Some(&inner.controls), Some(inner.eta), cs, &mut history, &mut flagged)?;
                inner = res.0;
                tau = inner.path.time.t1();
                cs = res.1;
                outer += 1;
            }
            if let Some(last) = history.last_mut() {
                last.os5 = cs;
            }
            let ok = inner.converged && cs.abs() < cfg.tol;
            let t_final = inner.path.time.t1();
            Ok(finish(inner, TimeAssignment::Common(t_final), None, cs, ok, history, flagged))
        }
        TimeMode::BoundaryScale {
            shape,
            side,
            initial,
            window,
        } => {
            let eval = |c: f64,
                        init: Option<&ControlField>,
                        os5: f64,
                        history: &mut Vec<ResidualRecord>,
                        flagged: &mut Vec<usize>|
             -> Result<(Inner, f64)> {
                let sh = shape.clone();
                let bfun = map1(move |t| c * sh(t));
                let boundary = side.boundary(bfun.clone());
                let mut book = Bookkeeping { history, flagged, os5 };
                let inner = sweep_fixed(prob, prob.time, &boundary, cfg, init, None, &mut book)?;
                let fb = Feedback::grid(inner.controls.clone());
                let profile =
                    boundary_stopping_profile(prob.spec, &fb, &inner.costate, &*bfun, *side, inner.eta, *window)?;
                if profile.is_empty() {
                    return Err(SolverError::invalid("window", "no time node inside the fit window"));
                }
                let mean = profile.iter().map(|p| p.1).sum::<f64>() / profile.len() as f64;
                Ok((inner, mean))
            };
            let mut c = *initial;
            let (mut inner, mut r) = eval(c, None, 0.0, &mut history, &mut flagged)?;
            let mut prev: Option<(f64, f64)> = None;
            let mut outer = 0;
            let (lo, hi) = (0.25 * initial.abs(), 4.0 * initial.abs());
            while r.abs() >= cfg.tol && outer < cfg.max_outer && history.len() < cfg.max_iters {
                let next = match prev {
                    None => c * 1.05,
                    Some((cp, rp)) => secant_step(c, r, cp, rp, lo, hi),
                };
                if (next - c).abs() < 1e-7 * c.abs().max(1e-3) {
                    break;
                }
                prev = Some((c, r));
                c = next;
                let res = eval(c, Some(&inner.controls), r, &mut history, &mut flagged)?;
                inner = res.0;
                r = res.1;
                outer += 1;
            }
            if let Some(last) = history.last_mut() {
                last.os5 = r;
            }
            let ok = inner.converged && r.abs() < cfg.tol;
            let t_end = prob.time.t1();
            Ok(finish(inner, TimeAssignment::Common(t_end), Some(c), r, ok, history, flagged))
        }
    }
}

fn cs_of(prob: &SweepProblem<'_>, inner: &Inner, cfg: &SweepConfig, time: TimeGrid) -> Result<f64> {
    let fb = Feedback::grid(inner.controls.clone());
    let mut ens = ParticleEnsemble::from_quantiles(prob.rho0, cfg.particles, time.t0());
    ens.stop_outside(&prob.boundary);
    let rule = StopRule {
        boundary: &prob.boundary,
        assignment: None,
    };
    advect_particles(&mut ens, &inner.vel, rule, time.dt(), time.t1())?;
    let _ = &inner.scores;
    common_stopping_residual(prob.spec, &fb, &inner.costate, &ens, inner.eta)
}

fn finish(
    inner: Inner,
    assignment: TimeAssignment,
    scale: Option<f64>,
    os5: f64,
    converged: bool,
    history: Vec<ResidualRecord>,
    flagged: Vec<usize>,
) -> SweepState {
    SweepState {
        controls: inner.controls,
        costate: inner.costate,
        multiplier: Multiplier { eta: inner.eta },
        assignment,
        boundary_scale: scale,
        path: inner.path,
        history,
        converged: converged && inner.converged,
        flagged,
        os1: inner.os1,
        os2: inner.os2,
        os4: inner.os4,
        os5,
    }
}
