//! Score-corrected velocity field and its characteristics.
//!
//! With a state-independent diffusion the Fokker–Planck equation can be
//! rewritten as a continuity equation driven by
//! `f̃ = f − (σ²/2)·∂ₓ log ρ`; the deterministic characteristics of `f̃`
//! reproduce the one-time marginals of the diffusion. Near an absorbing
//! boundary the score blows up, so it is only trusted outside a boundary
//! layer and extrapolated constantly into it.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Result, SolverError};
use crate::fokker_planck::{solve_fp, solve_fp_coefficients, DensityPath, DriftDiffusion};
use crate::grid::{fmt_num, gradient_central, interp_values, trapezoid, Field, Grid1D, TimeGrid};
use crate::model::{Feedback, InitialDensity, Map1, ProblemSpec, StoppingBoundary, TimeAssignment};
use crate::sde_mc::wasserstein1_sample_field;

/// `∂ₓ log ρ` on a grid, with the nodes where it can be trusted.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreField {
    pub grid: Grid1D,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl ScoreField {
    pub fn as_field(&self) -> Field {
        Field::from_raw(self.grid, self.values.clone())
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Score regularisation: relative density floor and boundary-layer width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreConfig {
    /// Floor as a fraction of the frame maximum.
    pub floor_rel: f64,
    /// Boundary-layer width; `None` means three grid spacings.
    pub layer_width: Option<f64>,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            floor_rel: 1e-10,
            layer_width: None,
        }
    }
}

impl ScoreConfig {
    pub fn layer(&self, grid: &Grid1D) -> f64 {
        self.layer_width.unwrap_or(3.0 * grid.dx())
    }
}

/// Score of one density frame. Nodes below `floor` or within
/// `layer_width` of a stopped node are masked and take the value of the
/// nearest valid node.
pub fn score_field(
    frame: &Field,
    floor: f64,
    layer_width: f64,
    boundary: &StoppingBoundary,
    t: f64,
) -> Result<ScoreField> {
    if !(floor > 0.0) {
        return Err(SolverError::invalid("floor", "must be positive"));
    }
    let grid = *frame.grid();
    let n = grid.len();
    let rho = frame.values();
    let grad = gradient_central(frame);
    let h = grid.dx();
    let stopped: Vec<bool> = (0..n).map(|j| boundary.level(t, grid.x(j)) >= 0.0).collect();

    // distance (in nodes) to the nearest stopped node
    let mut dist = vec![usize::MAX; n];
    let mut last: Option<usize> = None;
    for j in 0..n {
        if stopped[j] {
            last = Some(j);
        }
        if let Some(k) = last {
            dist[j] = j - k;
        }
    }
    last = None;
    for j in (0..n).rev() {
        if stopped[j] {
            last = Some(j);
        }
        if let Some(k) = last {
            dist[j] = dist[j].min(k - j);
        }
    }
    let layer_nodes = layer_width / h;
    let valid: Vec<bool> = (0..n)
        .map(|j| rho[j] >= floor && (dist[j] == usize::MAX || dist[j] as f64 > layer_nodes))
        .collect();
    if !valid.iter().any(|v| *v) {
        return Err(SolverError::AllMasked);
    }
    let mut values: Vec<f64> = (0..n)
        .map(|j| if valid[j] { grad.values()[j] / rho[j].max(floor) } else { 0.0 })
        .collect();
    extrapolate_nearest(&mut values, &valid);
    Ok(ScoreField { grid, values, valid })
}

/// Replaces invalid entries by the nearest valid one (ties go left).
fn extrapolate_nearest(values: &mut [f64], valid: &[bool]) {
    let n = values.len();
    let mut left: Vec<Option<usize>> = vec![None; n];
    let mut last = None;
    for j in 0..n {
        if valid[j] {
            last = Some(j);
        }
        left[j] = last;
    }
    let mut right = None;
    for j in (0..n).rev() {
        if valid[j] {
            right = Some(j);
            continue;
        }
        let src = match (left[j], right) {
            (Some(l), Some(r)) => {
                if j - l <= r - j {
                    l
                } else {
                    r
                }
            }
            (Some(l), None) => l,
            (None, Some(r)) => r,
            (None, None) => continue,
        };
        values[j] = values[src];
    }
}

/// Score for every frame of a density path.
pub fn score_path(path: &DensityPath, boundary: &StoppingBoundary, cfg: &ScoreConfig) -> Result<Vec<ScoreField>> {
    let layer = cfg.layer(path.grid());
    path.frames
        .par_iter()
        .enumerate()
        .map(|(k, frame)| {
            let floor = (cfg.floor_rel * frame.max()).max(f64::MIN_POSITIVE);
            score_field(frame, floor, layer, boundary, path.time.t(k))
        })
        .collect()
}

/// `f̃ = f(t,x,u) − (σ_t²/2)·score` at the grid nodes.
pub fn transformed_drift(spec: &ProblemSpec, u: &[f64], score: &ScoreField, t: f64) -> Field {
    let s = spec.sigma(t);
    let d = 0.5 * s * s;
    let values = (0..score.grid.len())
        .map(|j| {
            let x = score.grid.x(j);
            spec.drift(t, x, u[j]) - d * score.values[j]
        })
        .collect();
    Field::from_raw(score.grid, values)
}

/// Time-indexed velocity field `f̃(t_k, x_j)` under a fixed feedback.
#[derive(Debug, Clone)]
pub struct VelocityField {
    pub time: TimeGrid,
    pub frames: Vec<Field>,
    pub valid: Vec<Vec<bool>>,
    /// `∫∫ |f̃|² dμ_t dt`, the kinetic energy of the flow.
    pub energy: f64,
}

impl VelocityField {
    pub fn grid(&self) -> &Grid1D {
        self.frames[0].grid()
    }

    /// Linear interpolation in time and space.
    #[inline]
    pub fn eval(&self, t: f64, x: f64) -> f64 {
        let (k, w) = self.time.locate(t);
        let g = self.frames[k].grid();
        let a = interp_values(g, self.frames[k].values(), x);
        if w == 0.0 {
            return a;
        }
        let b = interp_values(g, self.frames[k + 1].values(), x);
        a + w * (b - a)
    }

    /// CSV with header `t,x,f_tilde`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,x,f_tilde")?;
        for (k, f) in self.frames.iter().enumerate() {
            let t = fmt_num(self.time.t(k));
            for (j, v) in f.values().iter().enumerate() {
                writeln!(out, "{},{},{}", t, fmt_num(f.grid().x(j)), fmt_num(*v))?;
            }
        }
        Ok(())
    }
}

/// Builds `f̃` on the time grid of `path` from the path's own scores.
pub fn velocity_field(
    spec: &ProblemSpec,
    feedback: &Feedback,
    path: &DensityPath,
    scores: &[ScoreField],
) -> VelocityField {
    let grid = *path.grid();
    let time = path.time;
    let frames: Vec<Field> = (0..time.nodes())
        .into_par_iter()
        .map(|k| {
            let t = time.t(k);
            let u = feedback.sample(t, &grid);
            transformed_drift(spec, &u, &scores[k], t)
        })
        .collect();
    let dt = time.dt();
    let per_frame: Vec<f64> = frames
        .iter()
        .zip(&path.frames)
        .map(|(v, rho)| {
            let e = Field::from_raw(grid, v.values().iter().zip(rho.values()).map(|(a, r)| a * a * r).collect());
            trapezoid(&e)
        })
        .collect();
    let energy = per_frame.windows(2).map(|w| 0.5 * dt * (w[0] + w[1])).sum();
    VelocityField {
        time,
        frames,
        valid: scores.iter().map(|s| s.valid.clone()).collect(),
        energy,
    }
}

/// Marker for particles that have not stopped.
pub const NOT_STOPPED: f64 = f64::INFINITY;

/// Characteristic particles with equal weights `1/N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub positions: Vec<f64>,
    pub origins: Vec<f64>,
    pub alive: Vec<bool>,
    /// Stop time, or [`NOT_STOPPED`].
    pub stop_time: Vec<f64>,
    /// Set once a particle has been clamped to the velocity grid.
    pub out_of_grid: Vec<bool>,
    /// Current time of the ensemble.
    pub time: f64,
}

impl ParticleEnsemble {
    pub fn from_positions(positions: Vec<f64>, t0: f64) -> Self {
        let n = positions.len();
        Self {
            origins: positions.clone(),
            positions,
            alive: vec![true; n],
            stop_time: vec![NOT_STOPPED; n],
            out_of_grid: vec![false; n],
            time: t0,
        }
    }

    /// Deterministic quantile placement `x_i = F⁻¹((i + ½)/N)`.
    pub fn from_quantiles(rho0: &InitialDensity, n: usize, t0: f64) -> Self {
        let pos = (0..n).map(|i| rho0.quantile((i as f64 + 0.5) / n as f64)).collect();
        Self::from_positions(pos, t0)
    }

    /// Random draws from `ρ₀`, one ChaCha stream per particle.
    pub fn sampled(rho0: &InitialDensity, n: usize, seed: u64, t0: f64) -> Self {
        let pos = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                rho0.quantile(rng.gen::<f64>())
            })
            .collect();
        Self::from_positions(pos, t0)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn alive_count(&self) -> usize {
        self.alive.iter().filter(|a| **a).count()
    }

    pub fn alive_fraction(&self) -> f64 {
        self.alive_count() as f64 / self.len().max(1) as f64
    }

    pub fn alive_positions(&self) -> Vec<f64> {
        self.positions
            .iter()
            .zip(&self.alive)
            .filter(|(_, a)| **a)
            .map(|(x, _)| *x)
            .collect()
    }

    pub fn mean_alive(&self) -> f64 {
        let p = self.alive_positions();
        crate::grid::pairwise_sum(&p) / p.len().max(1) as f64
    }

    /// Marks particles already outside the continuation region as stopped.
    pub fn stop_outside(&mut self, boundary: &StoppingBoundary) {
        for i in 0..self.len() {
            if self.alive[i] && boundary.level(self.time, self.positions[i]) >= 0.0 {
                self.alive[i] = false;
                self.stop_time[i] = self.time;
            }
        }
    }

    /// CSV with header `id,x,alive,stop_time`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "id,x,alive,stop_time")?;
        for i in 0..self.len() {
            let st = if self.stop_time[i].is_finite() {
                fmt_num(self.stop_time[i])
            } else {
                "inf".to_string()
            };
            writeln!(out, "{},{},{},{}", i, fmt_num(self.positions[i]), self.alive[i] as u8, st)?;
        }
        Ok(())
    }
}

/// Stopping rules applied while advecting characteristics.
#[derive(Clone, Copy)]
pub struct StopRule<'a> {
    pub boundary: &'a StoppingBoundary,
    pub assignment: Option<&'a TimeAssignment>,
}

struct ParticleStep {
    x: f64,
    alive: bool,
    stop: f64,
    clamped: bool,
}

fn rk4(vel: &VelocityField, t: f64, x: f64, h: f64) -> f64 {
    let k1 = vel.eval(t, x);
    let k2 = vel.eval(t + 0.5 * h, x + 0.5 * h * k1);
    let k3 = vel.eval(t + 0.5 * h, x + 0.5 * h * k2);
    let k4 = vel.eval(t + h, x + h * k3);
    x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

fn step_particle(vel: &VelocityField, rule: StopRule<'_>, origin: f64, x: f64, t: f64, dt: f64) -> ParticleStep {
    let grid = vel.grid();
    let tau = rule.assignment.map(|a| a.tau(origin));
    let (h, ends_at_tau) = match tau {
        Some(tau) if tau <= t => {
            return ParticleStep {
                x,
                alive: false,
                stop: t,
                clamped: false,
            }
        }
        Some(tau) if tau < t + dt => (tau - t, true),
        _ => (dt, false),
    };
    let mut x1 = rk4(vel, t, x, h);
    let mut clamped = false;
    if !grid.contains(x1) {
        x1 = x1.clamp(grid.x_min(), grid.x_max());
        clamped = true;
    }
    let l0 = rule.boundary.level(t, x);
    let l1 = rule.boundary.level(t + h, x1);
    if l1 >= 0.0 {
        // first crossing: linear-in-time estimate
        let theta = if l0 < 0.0 { (l0 / (l0 - l1)).clamp(0.0, 1.0) } else { 0.0 };
        return ParticleStep {
            x: x + theta * (x1 - x),
            alive: false,
            stop: t + theta * h,
            clamped,
        };
    }
    if ends_at_tau {
        return ParticleStep {
            x: x1,
            alive: false,
            stop: t + h,
            clamped,
        };
    }
    ParticleStep {
        x: x1,
        alive: true,
        stop: NOT_STOPPED,
        clamped,
    }
}

/// Advances every alive particle along `f̃` with RK4 steps of size `dt`
/// until `t_end`. Stopped particles never move again.
pub fn advect_particles(
    ens: &mut ParticleEnsemble,
    vel: &VelocityField,
    rule: StopRule<'_>,
    dt: f64,
    t_end: f64,
) -> Result<()> {
    if !(dt > 0.0) {
        return Err(SolverError::invalid("dt", "must be positive"));
    }
    if dt > vel.time.dt() * (1.0 + 1e-9) {
        return Err(SolverError::invalid("dt", "must not exceed the velocity time step"));
    }
    if t_end > vel.time.t1() + 1e-12 {
        return Err(SolverError::invalid("t_end", "beyond the velocity horizon"));
    }
    let steps = ((t_end - ens.time) / dt - 1e-9).ceil().max(0.0) as usize;
    if steps == 0 {
        return Ok(());
    }
    let h = (t_end - ens.time) / steps as f64;
    let t0 = ens.time;
    let results: Vec<ParticleStep> = (0..ens.len())
        .into_par_iter()
        .map(|i| {
            let mut st = ParticleStep {
                x: ens.positions[i],
                alive: ens.alive[i],
                stop: ens.stop_time[i],
                clamped: ens.out_of_grid[i],
            };
            if !st.alive {
                return st;
            }
            for k in 0..steps {
                let t = t0 + k as f64 * h;
                let next = step_particle(vel, rule, ens.origins[i], st.x, t, h);
                st.x = next.x;
                st.clamped |= next.clamped;
                if !next.alive {
                    st.alive = false;
                    st.stop = next.stop;
                    break;
                }
            }
            st
        })
        .collect();
    for (i, st) in results.into_iter().enumerate() {
        ens.positions[i] = st.x;
        ens.alive[i] = st.alive;
        ens.stop_time[i] = st.stop;
        ens.out_of_grid[i] = st.clamped;
    }
    ens.time = t_end;
    Ok(())
}

/// Silverman's rule of thumb `0.9·min(sd, IQR/1.34)·N^{-1/5}`.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len();
    if n < 2 {
        return 0.0;
    }
    let mean = crate::grid::pairwise_sum(samples) / n as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (n - 1) as f64;
        let j = pos.floor() as usize;
        let w = pos - j as f64;
        if j + 1 < n {
            sorted[j] * (1.0 - w) + sorted[j + 1] * w
        } else {
            sorted[n - 1]
        }
    };
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { var.sqrt().min(iqr / 1.34) } else { var.sqrt() };
    0.9 * spread * (n as f64).powf(-0.2)
}

/// Gaussian kernel-density estimate of the alive particles, scaled to the
/// alive fraction (a sub-probability density). The bandwidth defaults to
/// Silverman's rule and is never below one grid spacing.
pub fn pushforward_density(ens: &ParticleEnsemble, grid: &Grid1D, bandwidth: Option<f64>) -> Result<Field> {
    let alive = ens.alive_positions();
    if alive.len() < 100 {
        return Err(SolverError::TooFewParticles {
            needed: 100,
            got: alive.len(),
        });
    }
    let h = bandwidth.unwrap_or_else(|| silverman_bandwidth(&alive)).max(grid.dx());
    let n = grid.len();
    let dx = grid.dx();
    let weight = 1.0 / ens.len() as f64;
    // linear binning onto the nodes
    let mut bins = vec![0.0; n];
    for &x in &alive {
        let s = ((x - grid.x_min()) / dx).clamp(0.0, (n - 1) as f64);
        let j = (s.floor() as usize).min(n - 2);
        let w = s - j as f64;
        bins[j] += weight * (1.0 - w);
        bins[j + 1] += weight * w;
    }
    let reach = ((6.0 * h / dx).ceil() as usize).min(n);
    let norm = 1.0 / (h * (2.0 * std::f64::consts::PI).sqrt());
    let kernel: Vec<f64> = (0..=reach)
        .map(|m| norm * (-0.5 * (m as f64 * dx / h).powi(2)).exp())
        .collect();
    let values: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|j| {
            let lo = j.saturating_sub(reach);
            let hi = (j + reach).min(n - 1);
            let mut acc = 0.0;
            for (i, b) in bins.iter().enumerate().take(hi + 1).skip(lo) {
                if *b != 0.0 {
                    acc += b * kernel[i.abs_diff(j)];
                }
            }
            acc
        })
        .collect();
    Ok(Field::from_raw(*grid, values))
}

/// Grids and sizes for [`ito_recovery_residual`].
#[derive(Debug, Clone, Copy)]
pub struct ItoRecoverySetup {
    pub x_grid: Grid1D,
    pub y_grid: Grid1D,
    pub time: TimeGrid,
    pub particles: usize,
}

/// Monotone `C²` change of variables `y = g(x)` with its derivatives.
#[derive(Clone)]
pub struct StateMap {
    pub g: Map1,
    pub dg: Map1,
    pub d2g: Map1,
}

/// W1 distance at the horizon between
/// (a) `g(x_T)` with `x` following the score-corrected characteristics and
/// (b) the Fokker–Planck solution, on the `y` grid, of the SDE produced by
/// Itô's formula: `dy = [g'f + ½σ²g''] dt + g'σ dw`.
pub fn ito_recovery_residual(
    spec: &ProblemSpec,
    feedback: &Feedback,
    rho0: &InitialDensity,
    map: &StateMap,
    setup: &ItoRecoverySetup,
) -> Result<f64> {
    let xg = setup.x_grid;
    let sign = (map.dg)(xg.x(0)).signum();
    for j in 0..xg.len() {
        let d = (map.dg)(xg.x(j));
        if d == 0.0 || d.signum() != sign || !d.is_finite() {
            return Err(SolverError::NotMonotone { x: xg.x(j) });
        }
    }
    let time = setup.time;
    let none = StoppingBoundary::None;

    // (a) characteristics in x, then mapped
    let path = solve_fp(spec, feedback, rho0, &xg, &time, &none)?;
    let scores = score_path(&path, &none, &ScoreConfig::default())?;
    let vel = velocity_field(spec, feedback, &path, &scores);
    let mut ens = ParticleEnsemble::from_quantiles(rho0, setup.particles, time.t0());
    advect_particles(&mut ens, &vel, StopRule { boundary: &none, assignment: None }, time.dt(), time.t1())?;
    let mapped: Vec<f64> = ens.positions.iter().map(|&x| (map.g)(x)).collect();

    // (b) Itô-transformed SDE on the y grid
    let yg = setup.y_grid;
    let half = Grid1D::new(yg.x_min(), yg.x_max(), 2 * yg.len() - 1)?;
    let (lo, hi) = {
        let (a, b) = rho0.support();
        (a.min(xg.x_min()) - 10.0, b.max(xg.x_max()) + 10.0)
    };
    let inverse: Vec<f64> = half
        .nodes()
        .iter()
        .map(|&y| invert_monotone(&*map.g, y, lo, hi, sign))
        .collect::<Result<_>>()?;
    let x_of = |y: f64| interp_values(&half, &inverse, y);
    let drift = |t: f64, y: f64| {
        let x = x_of(y);
        let s = spec.sigma(t);
        (map.dg)(x) * spec.drift(t, x, feedback.eval(t, x)) + 0.5 * s * s * (map.d2g)(x)
    };
    let diffusivity = |t: f64, y: f64| {
        let x = x_of(y);
        0.5 * ((map.dg)(x) * spec.sigma(t)).powi(2)
    };
    let coeffs = DriftDiffusion {
        drift: &drift,
        diffusivity: &diffusivity,
    };
    let initial = Field::from_fn(yg, |y| {
        let x = x_of(y);
        rho0.density(x) / (map.dg)(x).abs()
    });
    let mass = trapezoid(&initial);
    if mass < 0.999 {
        return Err(SolverError::MassDeficit { mass });
    }
    let ypath = solve_fp_coefficients(&coeffs, initial, &time, &none)?;
    wasserstein1_sample_field(&mapped, ypath.frames.last().unwrap())
}

fn invert_monotone(g: &(dyn Fn(f64) -> f64 + Send + Sync), y: f64, lo: f64, hi: f64, sign: f64) -> Result<f64> {
    let f = |x: f64| sign * (g(x) - y);
    let (mut a, mut b) = (lo, hi);
    // widen until bracketed
    for _ in 0..60 {
        if f(a) <= 0.0 && f(b) >= 0.0 {
            break;
        }
        let w = b - a;
        a -= w;
        b += w;
    }
    crate::grid::bisect(f, a, b, 1e-13)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::map1;
    use crate::sde_mc::wasserstein1;

    fn gauss(x: f64, m: f64, v: f64) -> f64 {
        (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
    }

    fn ou() -> ProblemSpec {
        ProblemSpec::builder("ou").drift(|_, x, _| -x).sigma(2f64.sqrt()).build().unwrap()
    }

    fn grid() -> Grid1D {
        Grid1D::new(-8.0, 8.0, 1601).unwrap()
    }

    #[test]
    fn gaussian_scores() {
        let f = Field::from_fn(grid(), |x| gauss(x, 0.0, 1.0));
        let s = score_field(&f, 1e-12, 0.0, &StoppingBoundary::None, 0.0).unwrap();
        for j in 0..grid().len() {
            let x = grid().x(j);
            if x.abs() <= 3.0 {
                assert!((s.values[j] + x).abs() <= 1e-2);
            }
        }
        let (m, v) = (0.7, 0.49);
        let f = Field::from_fn(grid(), |x| gauss(x, m, v));
        let s = score_field(&f, 1e-12, 0.0, &StoppingBoundary::None, 0.0).unwrap();
        for j in 0..grid().len() {
            let x = grid().x(j);
            let exact = (m - x) / v;
            if (x - m).abs() <= 2.0 * v.sqrt() {
                assert!((s.values[j] - exact).abs() <= 1e-2 * exact.abs().max(1.0));
            }
        }
        let uni = Field::from_fn(Grid1D::new(0.0, 1.0, 101).unwrap(), |_| 1.0);
        let s = score_field(&uni, 1e-12, 0.0, &StoppingBoundary::None, 0.0).unwrap();
        assert!(s.values.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn masks_and_extrapolates_near_boundary() {
        let g = Grid1D::new(0.0, 4.0, 401).unwrap();
        let f = Field::from_fn(g, |x| x * (-x).exp());
        let b = StoppingBoundary::below_const(0.0);
        let s = score_field(&f, 1e-12, 0.03, &b, 0.0).unwrap();
        assert!(!s.valid[0] && !s.valid[3] && s.valid[4]);
        assert_eq!(s.values[0], s.values[4]);
        let zero = Field::zeros(g);
        assert_eq!(score_field(&zero, 1e-12, 0.0, &b, 0.0), Err(SolverError::AllMasked));
        assert!(score_field(&f, 0.0, 0.0, &b, 0.0).is_err());
    }

    #[test]
    fn transformed_drift_examples() {
        let g = grid();
        let n = g.len();
        let f = Field::from_fn(g, |x| gauss(x, 0.0, 1.0));
        let s = score_field(&f, 1e-12, 0.0, &StoppingBoundary::None, 0.0).unwrap();
        let ft = transformed_drift(&ou(), &vec![0.0; n], &s, 0.0);
        for j in 0..n {
            if g.x(j).abs() <= 4.0 {
                assert!(ft.values()[j].abs() <= 2e-2);
            }
        }
        // zero drift: f̃ = D x / s²
        let d = 0.8;
        let spec = ProblemSpec::builder("bm").sigma((2.0 * d as f64).sqrt()).build().unwrap();
        let f = Field::from_fn(g, |x| gauss(x, 0.0, 2.0));
        let s = score_field(&f, 1e-12, 0.0, &StoppingBoundary::None, 0.0).unwrap();
        let ft = transformed_drift(&spec, &vec![0.0; n], &s, 0.0);
        for j in 0..n {
            let x = g.x(j);
            if x.abs() <= 3.0 {
                assert!((ft.values()[j] - d * x / 2.0).abs() <= 1e-2);
            }
        }
        // f = u with u = -x
        let ctl = ProblemSpec::builder("int").drift(|_, _, u| u).sigma(2f64.sqrt()).build().unwrap();
        let f = Field::from_fn(g, |x| gauss(x, 0.0, 1.0));
        let s = score_field(&f, 1e-12, 0.0, &StoppingBoundary::None, 0.0).unwrap();
        let u: Vec<f64> = g.nodes().iter().map(|x| -x).collect();
        let ft = transformed_drift(&ctl, &u, &s, 0.0);
        for j in 0..n {
            if g.x(j).abs() <= 3.0 {
                assert!(ft.values()[j].abs() <= 1e-2);
            }
        }
    }

    fn constant_velocity(c: f64) -> VelocityField {
        let time = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let g = Grid1D::new(-5.0, 5.0, 11).unwrap();
        VelocityField {
            time,
            frames: vec![Field::from_fn(g, |_| c); time.nodes()],
            valid: vec![vec![true; g.len()]; time.nodes()],
            energy: 0.0,
        }
    }

    #[test]
    fn constant_flows_are_exact() {
        let none = StoppingBoundary::None;
        let rule = StopRule { boundary: &none, assignment: None };
        let mut ens = ParticleEnsemble::from_positions(vec![-1.0, 0.0, 2.0], 0.0);
        advect_particles(&mut ens, &constant_velocity(0.0), rule, 0.1, 1.0).unwrap();
        assert_eq!(ens.positions, vec![-1.0, 0.0, 2.0]);
        let mut ens = ParticleEnsemble::from_positions(vec![-1.0, 0.0, 2.0], 0.0);
        advect_particles(&mut ens, &constant_velocity(0.7), rule, 0.1, 1.0).unwrap();
        for (a, b) in ens.positions.iter().zip([-0.3, 0.7, 2.7]) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(advect_particles(&mut ens, &constant_velocity(0.7), rule, 0.5, 1.0).is_err());
    }

    #[test]
    fn crossing_and_assignment_stop_particles() {
        let b = StoppingBoundary::above_const(0.55);
        let tau = TimeAssignment::Common(0.35);
        let vel = constant_velocity(1.0);
        let mut ens = ParticleEnsemble::from_positions(vec![0.0, -1.0, 1.0], 0.0);
        ens.stop_outside(&b);
        assert!(!ens.alive[2]);
        advect_particles(&mut ens, &vel, StopRule { boundary: &b, assignment: None }, 0.1, 1.0).unwrap();
        assert!(!ens.alive[0]);
        assert!((ens.stop_time[0] - 0.55).abs() < 1e-9);
        assert!((ens.positions[0] - 0.55).abs() < 1e-9);
        assert!(!ens.alive[1] || ens.positions[1] < 0.55);
        let before = ens.positions[0];
        advect_particles(&mut ens, &vel, StopRule { boundary: &b, assignment: None }, 0.1, 1.0).unwrap();
        assert_eq!(ens.positions[0], before);

        let mut ens = ParticleEnsemble::from_positions(vec![0.0], 0.0);
        let none = StoppingBoundary::None;
        advect_particles(&mut ens, &vel, StopRule { boundary: &none, assignment: Some(&tau) }, 0.1, 1.0).unwrap();
        assert!(!ens.alive[0]);
        assert!((ens.stop_time[0] - 0.35).abs() < 1e-12);
        assert!((ens.positions[0] - 0.35).abs() < 1e-9);
    }

    #[test]
    fn out_of_grid_particles_are_flagged() {
        let none = StoppingBoundary::None;
        let mut ens = ParticleEnsemble::from_positions(vec![4.8], 0.0);
        advect_particles(&mut ens, &constant_velocity(1.0), StopRule { boundary: &none, assignment: None }, 0.1, 1.0)
            .unwrap();
        assert!(ens.out_of_grid[0]);
        assert_eq!(ens.positions[0], 5.0);
    }

    fn ou_velocity(time: TimeGrid, rho0: &InitialDensity) -> VelocityField {
        let spec = ou();
        let none = StoppingBoundary::None;
        let path = solve_fp(&spec, &Feedback::Zero, rho0, &grid(), &time, &none).unwrap();
        let scores = score_path(&path, &none, &ScoreConfig::default()).unwrap();
        velocity_field(&spec, &Feedback::Zero, &path, &scores)
    }

    #[test]
    fn ou_characteristics_track_the_mean() {
        let rho0 = InitialDensity::gaussian(2.0, 0.25).unwrap();
        let time = TimeGrid::new(0.0, 1.0, 1000).unwrap();
        let vel = ou_velocity(time, &rho0);
        assert!(vel.energy.is_finite() && vel.energy > 0.0);
        let mut ens = ParticleEnsemble::from_quantiles(&rho0, 20_000, 0.0);
        let none = StoppingBoundary::None;
        advect_particles(&mut ens, &vel, StopRule { boundary: &none, assignment: None }, 1e-3, 1.0).unwrap();
        let expect = 2.0 * (-1.0f64).exp();
        assert!((ens.mean_alive() - expect).abs() / expect < 0.02);
        // marginal law against the analytic OU Gaussian
        let var = 0.25 * (-2.0f64).exp() + (1.0 - (-2.0f64).exp());
        let exact = Field::from_fn(grid(), |x| gauss(x, expect, var));
        assert!(wasserstein1_sample_field(&ens.positions, &exact).unwrap() < 0.02);
    }

    #[test]
    fn rk4_refinement_is_high_order() {
        let rho0 = InitialDensity::gaussian(2.0, 0.25).unwrap();
        let time = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let vel = ou_velocity(time, &rho0);
        let none = StoppingBoundary::None;
        let run = |dt: f64| {
            let mut e = ParticleEnsemble::from_positions(vec![1.5, 2.0, 2.5], 0.0);
            advect_particles(&mut e, &vel, StopRule { boundary: &none, assignment: None }, dt, 1.0).unwrap();
            e.positions
        };
        let (a, b, c) = (run(0.01), run(0.005), run(0.0025));
        // self-convergence: successive differences shrink; the piecewise-linear
        // velocity interpolation limits the observed order, so only require
        // at least second order here
        let d1: f64 = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        let d2: f64 = b.iter().zip(&c).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(d1 < 1e-4 && d2 <= d1);
    }

    #[test]
    fn pushforward_masses() {
        let g = Grid1D::new(-2.0, 2.0, 401).unwrap();
        let ens = ParticleEnsemble::from_positions(vec![0.0; 500], 0.0);
        let f = pushforward_density(&ens, &g, None).unwrap();
        assert!((trapezoid(&f) - 1.0).abs() < 1e-3);
        let mut ens = ParticleEnsemble::from_positions((0..1000).map(|i| (i as f64 / 1000.0) - 0.5).collect(), 0.0);
        for i in 0..500 {
            ens.alive[i] = false;
        }
        let f = pushforward_density(&ens, &g, None).unwrap();
        assert!((trapezoid(&f) - 0.5).abs() < 1e-2);
        let few = ParticleEnsemble::from_positions(vec![0.0; 10], 0.0);
        assert!(matches!(pushforward_density(&few, &g, None), Err(SolverError::TooFewParticles { .. })));
    }

    #[test]
    fn pushforward_of_gaussian_sample() {
        let rho0 = InitialDensity::gaussian(0.0, 1.0).unwrap();
        let ens = ParticleEnsemble::sampled(&rho0, 100_000, 7, 0.0);
        let f = pushforward_density(&ens, &grid(), None).unwrap();
        let exact = Field::from_fn(grid(), |x| gauss(x, 0.0, 1.0));
        let exact_sample: Vec<f64> = (0..20_000).map(|i| rho0.quantile((i as f64 + 0.5) / 20_000.0)).collect();
        assert!(wasserstein1_sample_field(&exact_sample, &f).unwrap() <= 0.02);
        assert!(wasserstein1_sample_field(&ens.positions, &exact).unwrap() <= 0.02);
        assert!(wasserstein1(&ens.positions, &exact_sample).unwrap() <= 0.02);
    }

    fn ito_setup(y_lo: f64, y_hi: f64, ny: usize) -> ItoRecoverySetup {
        ItoRecoverySetup {
            x_grid: grid(),
            y_grid: Grid1D::new(y_lo, y_hi, ny).unwrap(),
            time: TimeGrid::new(0.0, 0.5, 500).unwrap(),
            particles: 20_000,
        }
    }

    #[test]
    fn ito_recovery_identity_and_affine() {
        let rho0 = InitialDensity::gaussian(2.0, 0.25).unwrap();
        let id = StateMap {
            g: map1(|x| x),
            dg: map1(|_| 1.0),
            d2g: map1(|_| 0.0),
        };
        let r = ito_recovery_residual(&ou(), &Feedback::Zero, &rho0, &id, &ito_setup(-8.0, 8.0, 1601)).unwrap();
        assert!(r <= 0.02, "identity residual {r}");
        let aff = StateMap {
            g: map1(|x| 2.0 * x + 1.0),
            dg: map1(|_| 2.0),
            d2g: map1(|_| 0.0),
        };
        let r = ito_recovery_residual(&ou(), &Feedback::Zero, &rho0, &aff, &ito_setup(-15.0, 17.0, 3201)).unwrap();
        assert!(r <= 0.02, "affine residual {r}");
    }

    #[test]
    fn ito_recovery_rejects_non_monotone_maps() {
        let rho0 = InitialDensity::gaussian(2.0, 0.25).unwrap();
        let sq = StateMap {
            g: map1(|x| x * x),
            dg: map1(|x| 2.0 * x),
            d2g: map1(|_| 2.0),
        };
        assert!(matches!(
            ito_recovery_residual(&ou(), &Feedback::Zero, &rho0, &sq, &ito_setup(-1.0, 64.0, 1001)),
            Err(SolverError::NotMonotone { .. })
        ));
    }
}
