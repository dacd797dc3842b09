//! Forward propagation of the alive density.
//!
//! The Fokker–Planck equation is written in flux form
//! `∂ρ/∂t = -∂ₓF`, `F = μρ - ∂ₓ(Dρ)`, and discretised with exponentially
//! fitted (Chang–Cooper / Scharfetter–Gummel) fluxes and implicit Euler in
//! time. The resulting matrix is an M-matrix, so the scheme is positive for
//! any `dt` and reproduces the Gaussian stationary state of linear drifts
//! exactly. Nodes outside the continuation region carry a zero Dirichlet
//! value; the ends of the grid are zero-flux (truncation is monitored via
//! [`mass_balance`]).

use std::io::Write;

use crate::error::{Result, SolverError};
use crate::grid::{fmt_num, solve_tridiagonal, trapezoid_values, Field, Grid1D, TimeGrid};
use crate::model::{Feedback, InitialDensity, ProblemSpec, StoppingBoundary};

const DIVERGENCE_LIMIT: f64 = 1e12;

/// Outward probability-mass rate through the absorbing boundary at time `t`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FluxRecord {
    pub t: f64,
    pub flux_left: f64,
    pub flux_right: f64,
    /// Mass removed because a moving boundary swept over alive nodes.
    pub snapped_mass: f64,
    /// `(x, outward rate)` at every absorbing node fed by an alive neighbour.
    pub exits: Vec<(f64, f64)>,
    /// `(x, mass)` swept up by a moving boundary.
    pub snapped: Vec<(f64, f64)>,
}

impl FluxRecord {
    pub fn total(&self) -> f64 {
        self.flux_left + self.flux_right
    }
}

/// Alive density frames on a shared time grid.
#[derive(Debug, Clone)]
pub struct DensityPath {
    pub time: TimeGrid,
    pub frames: Vec<Field>,
    pub alive_mass: Vec<f64>,
    /// One record per time node (the first one describes the initial frame).
    pub exit_flux: Vec<FluxRecord>,
    /// Total negative mass removed by clipping.
    pub clipped_mass: f64,
}

impl DensityPath {
    pub fn grid(&self) -> &Grid1D {
        self.frames[0].grid()
    }

    /// Frame at the time node nearest to `t`.
    pub fn frame_at(&self, t: f64) -> &Field {
        &self.frames[self.time.nearest(t)]
    }

    /// Cumulative absorbed mass: trapezoid of total exit flux plus any
    /// snapped mass.
    pub fn absorbed_mass(&self) -> Vec<f64> {
        let dt = self.time.dt();
        let mut out = Vec::with_capacity(self.exit_flux.len());
        let mut acc = 0.0;
        out.push(0.0);
        for w in self.exit_flux.windows(2) {
            acc += 0.5 * dt * (w[0].total() + w[1].total()) + w[1].snapped_mass;
            out.push(acc);
        }
        out
    }

    /// CSV with header `t,x,rho`.
    pub fn write_density_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,x,rho")?;
        for (k, f) in self.frames.iter().enumerate() {
            let t = fmt_num(self.time.t(k));
            for (j, v) in f.values().iter().enumerate() {
                writeln!(out, "{},{},{}", t, fmt_num(f.grid().x(j)), fmt_num(*v))?;
            }
        }
        Ok(())
    }

    /// CSV with header `t,flux_left,flux_right,alive_mass`.
    pub fn write_flux_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,flux_left,flux_right,alive_mass")?;
        for (rec, m) in self.exit_flux.iter().zip(&self.alive_mass) {
            writeln!(
                out,
                "{},{},{},{}",
                fmt_num(rec.t),
                fmt_num(rec.flux_left),
                fmt_num(rec.flux_right),
                fmt_num(*m)
            )?;
        }
        Ok(())
    }
}

/// Drift `μ(t,x)` and diffusivity `D(t,x) = ½·(diffusion)²` of a general
/// one-dimensional Fokker–Planck equation.
pub struct DriftDiffusion<'a> {
    pub drift: &'a (dyn Fn(f64, f64) -> f64 + Sync),
    pub diffusivity: &'a (dyn Fn(f64, f64) -> f64 + Sync),
}

/// `x / (e^x - 1)`, continuous at zero.
#[inline]
fn bernoulli(x: f64) -> f64 {
    if x.abs() < 1e-6 {
        1.0 - 0.5 * x + x * x / 12.0
    } else if x > 700.0 {
        0.0
    } else if x < -700.0 {
        -x
    } else {
        x / x.exp_m1()
    }
}

fn alive_mask(grid: &Grid1D, boundary: &StoppingBoundary, t: f64) -> Vec<bool> {
    (0..grid.len()).map(|j| boundary.level(t, grid.x(j)) < 0.0).collect()
}

/// Trapezoid weight of node `j`.
#[inline]
fn node_weight(j: usize, n: usize, h: f64) -> f64 {
    if j == 0 || j + 1 == n {
        0.5 * h
    } else {
        h
    }
}

/// Outward flux `-D ∂ₙρ` at every absorbing node adjacent to an alive run,
/// using the second-order one-sided derivative (ρ = 0 on the node itself).
fn boundary_fluxes(
    grid: &Grid1D,
    rho: &[f64],
    alive: &[bool],
    t: f64,
    diffusivity: &dyn Fn(f64, f64) -> f64,
) -> FluxRecord {
    let n = rho.len();
    let h = grid.dx();
    let mut rec = FluxRecord {
        t,
        ..Default::default()
    };
    for k in 0..n {
        if alive[k] {
            continue;
        }
        // absorbing node with alive neighbour to the right: lower edge
        if k + 1 < n && alive[k + 1] {
            let d = diffusivity(t, grid.x(k));
            let slope = if k + 2 < n && alive[k + 2] {
                (-3.0 * rho[k] + 4.0 * rho[k + 1] - rho[k + 2]) / (2.0 * h)
            } else {
                (rho[k + 1] - rho[k]) / h
            };
            rec.flux_left += d * slope;
            rec.exits.push((grid.x(k), d * slope));
        }
        if k >= 1 && alive[k - 1] {
            let d = diffusivity(t, grid.x(k));
            let slope = if k >= 2 && alive[k - 2] {
                (3.0 * rho[k] - 4.0 * rho[k - 1] + rho[k - 2]) / (2.0 * h)
            } else {
                (rho[k] - rho[k - 1]) / h
            };
            rec.flux_right += -d * slope;
            rec.exits.push((grid.x(k), -d * slope));
        }
    }
    rec
}

struct StepOutput {
    rho: Vec<f64>,
    flux: FluxRecord,
    clipped: f64,
}

fn implicit_step(
    grid: &Grid1D,
    rho: &[f64],
    t_new: f64,
    dt: f64,
    coeffs: &DriftDiffusion<'_>,
    alive_old: &[bool],
    alive_new: &[bool],
) -> Result<StepOutput> {
    let n = grid.len();
    let h = grid.dx();
    let r = dt / h;
    // flux F_{j+1/2} = a_j ρ_j + c_j ρ_{j+1}
    let mut a = vec![0.0; n - 1];
    let mut c = vec![0.0; n - 1];
    let d_node: Vec<f64> = (0..n).map(|j| (coeffs.diffusivity)(t_new, grid.x(j))).collect();
    for j in 0..n - 1 {
        let xm = 0.5 * (grid.x(j) + grid.x(j + 1));
        let d = (coeffs.diffusivity)(t_new, xm);
        let b = (coeffs.drift)(t_new, xm) - (d_node[j + 1] - d_node[j]) / h;
        if !(b.is_finite() && d.is_finite()) {
            return Err(SolverError::NonFiniteEvaluation {
                what: "Fokker-Planck coefficient",
                t: t_new,
                x: xm,
            });
        }
        if d <= 0.0 {
            // pure upwind transport
            a[j] = b.max(0.0);
            c[j] = b.min(0.0);
        } else {
            let w = b * h / d;
            a[j] = d / h * bernoulli(-w);
            c[j] = -d / h * bernoulli(w);
        }
    }
    let mut lower = vec![0.0; n];
    let mut diag = vec![1.0; n];
    let mut upper = vec![0.0; n];
    let mut rhs = rho.to_vec();
    let mut snapped = 0.0;
    let mut snapped_at = Vec::new();
    for j in 0..n {
        if !alive_new[j] {
            if alive_old[j] && rho[j] > 0.0 {
                let m = rho[j] * node_weight(j, n, h);
                snapped += m;
                snapped_at.push((grid.x(j), m));
            }
            rhs[j] = 0.0;
            continue;
        }
        if j + 1 < n {
            diag[j] += r * a[j];
            upper[j] = r * c[j];
        }
        if j >= 1 {
            diag[j] -= r * c[j - 1];
            lower[j] = -r * a[j - 1];
        }
    }
    solve_tridiagonal(&lower, &diag, &upper, &mut rhs);
    let mut clipped = 0.0;
    for (j, v) in rhs.iter_mut().enumerate() {
        if !v.is_finite() || v.abs() > DIVERGENCE_LIMIT {
            return Err(SolverError::SchemeDiverged {
                t: t_new,
                detail: format!("density {v} at x={}", grid.x(j)),
            });
        }
        if *v < 0.0 {
            clipped -= *v * node_weight(j, n, h);
            *v = 0.0;
        }
    }
    let mut flux = boundary_fluxes(grid, &rhs, alive_new, t_new, coeffs.diffusivity);
    flux.snapped_mass = snapped;
    flux.snapped = snapped_at;
    Ok(StepOutput {
        rho: rhs,
        flux,
        clipped,
    })
}

/// One implicit step of the controlled Fokker–Planck equation from `t` to
/// `t + dt`. `u` holds the control at each grid node. Unconditionally
/// stable; `dt` only affects accuracy.
pub fn fp_step(
    frame: &Field,
    spec: &ProblemSpec,
    u: &[f64],
    t: f64,
    dt: f64,
    boundary: &StoppingBoundary,
) -> Result<(Field, FluxRecord)> {
    if !(dt > 0.0) {
        return Err(SolverError::invalid("dt", "must be positive"));
    }
    let grid = *frame.grid();
    if u.len() != grid.len() {
        return Err(SolverError::invalid("u", "one control value per node required"));
    }
    let t_new = t + dt;
    let sigma = spec.sigma_checked(t_new)?;
    let h = grid.dx();
    let x0 = grid.x_min();
    let drift = |tt: f64, x: f64| {
        let s = ((x - x0) / h).clamp(0.0, (grid.len() - 1) as f64);
        let j = (s.floor() as usize).min(grid.len() - 2);
        let w = s - j as f64;
        spec.drift(tt, x, u[j] * (1.0 - w) + u[j + 1] * w)
    };
    let d = 0.5 * sigma * sigma;
    let diffusivity = move |_: f64, _: f64| d;
    let coeffs = DriftDiffusion {
        drift: &drift,
        diffusivity: &diffusivity,
    };
    let alive_old = alive_mask(&grid, boundary, t);
    let alive_new = alive_mask(&grid, boundary, t_new);
    let out = implicit_step(&grid, frame.values(), t_new, dt, &coeffs, &alive_old, &alive_new)?;
    Ok((Field::from_raw(grid, out.rho), out.flux))
}

/// Full forward solve under feedback `u(t,x)`.
pub fn solve_fp(
    spec: &ProblemSpec,
    feedback: &Feedback,
    rho0: &InitialDensity,
    grid: &Grid1D,
    time: &TimeGrid,
    boundary: &StoppingBoundary,
) -> Result<DensityPath> {
    boundary.validate(time)?;
    let (initial, mass) = rho0.project(grid);
    if mass < 0.999 {
        return Err(SolverError::MassDeficit { mass });
    }
    for k in 0..time.nodes() {
        spec.sigma_checked(time.t(k))?;
    }
    let h = grid.dx();
    let x0 = grid.x_min();
    let n = grid.len();
    // Control is frozen over each step at its value at the new time level.
    let controls: Vec<Vec<f64>> = (0..time.nodes()).map(|k| feedback.sample(time.t(k), grid)).collect();
    let drift = |t: f64, x: f64| {
        let k = time.nearest(t);
        let s = ((x - x0) / h).clamp(0.0, (n - 1) as f64);
        let j = (s.floor() as usize).min(n - 2);
        let w = s - j as f64;
        let u = &controls[k];
        spec.drift(t, x, u[j] * (1.0 - w) + u[j + 1] * w)
    };
    let diffusivity = |t: f64, _x: f64| {
        let s = spec.sigma(t);
        0.5 * s * s
    };
    let coeffs = DriftDiffusion {
        drift: &drift,
        diffusivity: &diffusivity,
    };
    solve_fp_coefficients(&coeffs, initial, time, boundary)
}

/// Forward solve of a general drift-diffusion Fokker–Planck equation from a
/// grid-sampled initial frame. The frame is zeroed outside the continuation
/// region at the initial time.
pub fn solve_fp_coefficients(
    coeffs: &DriftDiffusion<'_>,
    mut initial: Field,
    time: &TimeGrid,
    boundary: &StoppingBoundary,
) -> Result<DensityPath> {
    let grid = *initial.grid();
    let n = grid.len();
    let h = grid.dx();
    let t0 = time.t0();
    let mut alive = alive_mask(&grid, boundary, t0);
    for (v, a) in initial.values_mut().iter_mut().zip(&alive) {
        if !a {
            *v = 0.0;
        }
    }
    let mut frames = Vec::with_capacity(time.nodes());
    let mut alive_mass = Vec::with_capacity(time.nodes());
    let mut fluxes = Vec::with_capacity(time.nodes());
    alive_mass.push(trapezoid_values(initial.values(), h));
    fluxes.push(boundary_fluxes(&grid, initial.values(), &alive, t0, coeffs.diffusivity));
    frames.push(initial);
    let mut clipped_total = 0.0;
    let dt = time.dt();
    for k in 1..time.nodes() {
        let t_new = time.t(k);
        let alive_new = alive_mask(&grid, boundary, t_new);
        let prev = frames.last().unwrap().values();
        let out = implicit_step(&grid, prev, t_new, dt, coeffs, &alive, &alive_new)?;
        clipped_total += out.clipped;
        alive_mass.push(trapezoid_values(&out.rho, h));
        fluxes.push(out.flux);
        frames.push(Field::from_raw(grid, out.rho));
        alive = alive_new;
    }
    debug_assert_eq!(frames.len(), time.nodes());
    debug_assert!(frames.iter().all(|f| f.values().len() == n));
    Ok(DensityPath {
        time: *time,
        frames,
        alive_mass,
        exit_flux: fluxes,
        clipped_mass: clipped_total,
    })
}

/// Residual series `alive + absorbed - 1` at every time node.
pub fn mass_balance(path: &DensityPath) -> Vec<f64> {
    path.alive_mass
        .iter()
        .zip(path.absorbed_mass())
        .map(|(a, b)| a + b - 1.0)
        .collect()
}
