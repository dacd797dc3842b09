//! Reference solutions and the benchmark runner.
//!
//! The oracles below rely only on closed forms, RK4 and the root finders in
//! [`crate::grid`]; none of them call the density, value or costate solvers.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::diagnostics::CheckReport;
use crate::error::{Result, SolverError};
use crate::fokker_planck::solve_fp;
use crate::grid::{bisect, fmt_num, Field};
use crate::model::{map1, Feedback, StoppingBoundary};
use crate::optimality::{
    boundary_stopping_profile, costate_sweep, fb_sweep, modified_hamiltonian, BoundarySide, CostateConfig,
    SweepConfig, SweepProblem, TimeMode,
};
use crate::presets::{self, LqParams, PutParams};
use crate::transform::{score_path, ScoreConfig};
use crate::value_hjb::{solve_obstacle_vi, EndCondition, VIMode, ValueConfig};

/// Perpetual American put: exercise level and value curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PutOracle {
    pub r: f64,
    pub sigma: f64,
    pub strike: f64,
    /// Negative root `m` of `½σ²m(m−1) + rm − r = 0`.
    pub exponent: f64,
    pub b_star: f64,
}

/// Solves the stationary pricing ODE `½σ²S²V'' + rSV' − rV = 0` above the
/// exercise level with the decaying power solution, then fixes the level
/// by smooth pasting `V'(b) = −1` (value matching is built in).
pub fn american_put_oracle(r: f64, sigma: f64, strike: f64) -> Result<PutOracle> {
    if !(r > 0.0 && sigma > 0.0 && strike > 0.0) {
        return Err(SolverError::invalid("put", "r, sigma and strike must be positive"));
    }
    let s2 = sigma * sigma;
    let beta = r - 0.5 * s2;
    let exponent = (-beta - (beta * beta + 2.0 * s2 * r).sqrt()) / s2;
    let pasting = |b: f64| exponent * (strike - b) / b + 1.0;
    let b_star = bisect(pasting, 1e-9 * strike, strike * (1.0 - 1e-12), 1e-15 * strike)?;
    Ok(PutOracle {
        r,
        sigma,
        strike,
        exponent,
        b_star,
    })
}

impl PutOracle {
    /// Closed form of the exercise level, `2rK/(2r + σ²)`.
    pub fn closed_form_boundary(&self) -> f64 {
        2.0 * self.r * self.strike / (2.0 * self.r + self.sigma * self.sigma)
    }

    pub fn value(&self, s: f64) -> f64 {
        if s <= self.b_star {
            self.strike - s
        } else {
            (self.strike - self.b_star) * (s / self.b_star).powf(self.exponent)
        }
    }

    /// Derivative from the continuation side at `b*`.
    pub fn derivative(&self, s: f64) -> f64 {
        if s < self.b_star {
            -1.0
        } else {
            self.exponent * (self.strike - self.b_star) / s * (s / self.b_star).powf(self.exponent)
        }
    }

    /// Value matching, smooth pasting, agreement with the closed form and
    /// the ODE residual at a few prices above `b*`.
    pub fn self_checks(&self) -> Vec<CheckReport> {
        let b = self.b_star;
        let above = b * (1.0 + 1e-9);
        let cont = self.value(above) + above;
        let ode = [1.2, 2.0, 5.0]
            .iter()
            .map(|m| {
                let s = m * b;
                let e = self.exponent;
                let v = self.value(s);
                let d1 = e * v / s;
                let d2 = e * (e - 1.0) * v / (s * s);
                (0.5 * self.sigma * self.sigma * s * s * d2 + self.r * s * d1 - self.r * v).abs()
            })
            .fold(0.0, f64::max);
        vec![
            CheckReport::new("put_value_matching", cont - self.strike, 1e-12, ""),
            CheckReport::new("put_smooth_pasting", self.derivative(b) + 1.0, 1e-8, ""),
            CheckReport::new(
                "put_boundary_closed_form",
                (b - self.closed_form_boundary()) / self.closed_form_boundary(),
                1e-10,
                format!("b* = {}", fmt_num(b)),
            ),
            CheckReport::new("put_ode_residual", ode, 1e-12, ""),
        ]
    }
}

/// Frozen boundary scale `B` of the bridge stopping boundary `B√(1−t)`.
/// Regenerated by `bridge_fixture_regeneration` in this module's tests.
pub const BRIDGE_B: f64 = 0.839_923_675_692_373;

/// `B` for `b(t) = B√(1−t)`.
pub fn brownian_bridge_oracle() -> f64 {
    BRIDGE_B
}

pub fn bridge_boundary(t: f64) -> f64 {
    BRIDGE_B * (1.0 - t).max(0.0).sqrt()
}

/// Smooth-fit equation of the scaled bridge problem. With `z = x/√(1−t)`
/// the value is `√(1−t)·W(z)`, where `W'' − zW' − W = 0` below the
/// boundary; the solution vanishing at `−∞` is `c·e^{z²/2}Φ(z)`.
/// Value matching and smooth pasting at `z = B` reduce to
/// `(1 − B²)·√(2π)·e^{B²/2}Φ(B) − B = 0`.
pub fn bridge_equation(b: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    (1.0 - b * b) * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * b * b).exp() * n.cdf(b) - b
}

/// Root of [`bridge_equation`] on `[lo, hi]`.
pub fn solve_bridge_scale(lo: f64, hi: f64) -> Result<f64> {
    bisect(bridge_equation, lo, hi, 1e-15)
}

/// OS5 residual on the curve `c√(1−t)` when the value is that of stopping
/// there, times `√(1−t)`. Zero exactly at `c = B`.
pub fn bridge_scaled_residual(c: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    let h = (0.5 * c * c).exp() * n.cdf(c);
    let dh = c * h + 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    0.5 * c * (1.0 - c * dh / h)
}

/// Scalar Riccati solution on a uniform grid, integrated backward with RK4.
#[derive(Debug, Clone)]
pub struct RiccatiOracle {
    pub params: LqParams,
    pub dt: f64,
    /// `P(t_k)`.
    pub p: Vec<f64>,
    /// Value offset `c(t_k)` with `V = ½Px² + c`.
    pub offset: Vec<f64>,
    /// Costate shift per unit multiplier: `λ = Px + η·s(t)` under `Ψ = x − m`.
    pub shift: Vec<f64>,
}

/// `−Ṗ = 2aP − P²b²/r + q`, `P(T) = q_f`; `−ċ = ½σ²P`; and
/// `−ṡ = (a − b²P/r)s`, `s(T) = −1`.
pub fn lq_riccati_oracle(params: LqParams, dt: f64) -> Result<RiccatiOracle> {
    let LqParams {
        a,
        b,
        sigma,
        q,
        r,
        qf,
        horizon,
    } = params;
    if !(r > 0.0) {
        return Err(SolverError::invalid("r", "control weight must be positive"));
    }
    if !(dt > 0.0 && horizon > 0.0) {
        return Err(SolverError::invalid("dt", "must be positive"));
    }
    let n = (horizon / dt).round().max(1.0) as usize;
    let h = horizon / n as f64;
    // state y = (P, c, s); derivative with respect to backward time
    let rhs = |y: [f64; 3]| -> [f64; 3] {
        let p = y[0];
        [
            2.0 * a * p - p * p * b * b / r + q,
            0.5 * sigma * sigma * p,
            (a - b * b * p / r) * y[2],
        ]
    };
    let add = |y: [f64; 3], k: [f64; 3], s: f64| [y[0] + s * k[0], y[1] + s * k[1], y[2] + s * k[2]];
    let mut ys = vec![[0.0; 3]; n + 1];
    ys[n] = [qf, 0.0, -1.0];
    for k in (0..n).rev() {
        let y = ys[k + 1];
        let k1 = rhs(y);
        let k2 = rhs(add(y, k1, 0.5 * h));
        let k3 = rhs(add(y, k2, 0.5 * h));
        let k4 = rhs(add(y, k3, h));
        ys[k] = [
            y[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            y[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
            y[2] + h / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]),
        ];
    }
    Ok(RiccatiOracle {
        params,
        dt: h,
        p: ys.iter().map(|y| y[0]).collect(),
        offset: ys.iter().map(|y| y[1]).collect(),
        shift: ys.iter().map(|y| y[2]).collect(),
    })
}

impl RiccatiOracle {
    fn at(&self, v: &[f64], t: f64) -> f64 {
        let n = v.len() - 1;
        let s = (t / self.dt).clamp(0.0, n as f64);
        let k = (s.floor() as usize).min(n - 1);
        let w = s - k as f64;
        v[k] * (1.0 - w) + v[k + 1] * w
    }

    pub fn p_at(&self, t: f64) -> f64 {
        self.at(&self.p, t)
    }

    /// Feedback gain `−bP/r`.
    pub fn gain(&self, t: f64) -> f64 {
        -self.params.b * self.p_at(t) / self.params.r
    }

    pub fn feedback(&self, t: f64, x: f64) -> f64 {
        self.gain(t) * x
    }

    pub fn value(&self, t: f64, x: f64) -> f64 {
        0.5 * self.p_at(t) * x * x + self.at(&self.offset, t)
    }

    /// `−∂ₜV` read off the Riccati right-hand side.
    pub fn hamiltonian(&self, t: f64, x: f64) -> f64 {
        let LqParams { a, b, sigma, q, r, .. } = self.params;
        let p = self.p_at(t);
        0.5 * (2.0 * a * p - p * p * b * b / r + q) * x * x + 0.5 * sigma * sigma * p
    }

    /// Mean of the optimally controlled state at the horizon from mean `m0`
    /// under multiplier `eta`, by forward RK4 on
    /// `ṁ = (a − b²P/r)m − (b²/r)·η·s`.
    pub fn terminal_mean(&self, m0: f64, eta: f64) -> f64 {
        let LqParams { a, b, r, .. } = self.params;
        let n = self.p.len() - 1;
        let f = |k: usize, m: f64| (a - b * b * self.p[k] / r) * m - b * b / r * eta * self.shift[k];
        let mut m = m0;
        let mut k = 0;
        // step 2·dt with the stored midpoint
        while k + 2 <= n {
            let h = 2.0 * self.dt;
            let k1 = f(k, m);
            let k2 = f(k + 1, m + 0.5 * h * k1);
            let k3 = f(k + 1, m + 0.5 * h * k2);
            let k4 = f(k + 2, m + h * k3);
            m += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            k += 2;
        }
        if k < n {
            let h = self.dt;
            let k1 = f(k, m);
            let k2 = f(k + 1, m + h * k1);
            m += 0.5 * h * (k1 + k2);
        }
        m
    }

    /// Multiplier with `E[x_T] = target`, by secant shooting (exact up to
    /// rounding since the terminal mean is affine in `η`).
    pub fn mean_multiplier(&self, m0: f64, target: f64) -> Result<f64> {
        let (e0, e1) = (0.0, 1.0);
        let (r0, r1) = (self.terminal_mean(m0, e0) - target, self.terminal_mean(m0, e1) - target);
        if (r1 - r0).abs() < 1e-300 {
            return Err(SolverError::RootNotBracketed { lo: e0, hi: e1 });
        }
        let eta = e1 - r1 * (e1 - e0) / (r1 - r0);
        Ok(eta)
    }

    /// Costate `Px + η·s(t)`.
    pub fn costate(&self, t: f64, x: f64, eta: f64) -> f64 {
        self.p_at(t) * x + eta * self.at(&self.shift, t)
    }

    /// `P(0)` against `1/(1+T)` for the pure-integrator problem with unit
    /// terminal weight.
    pub fn closed_form_check(dt: f64) -> Result<CheckReport> {
        let o = lq_riccati_oracle(
            LqParams {
                a: 0.0,
                b: 1.0,
                sigma: 0.0,
                q: 0.0,
                r: 1.0,
                qf: 1.0,
                horizon: 1.0,
            },
            dt,
        )?;
        let worst = (0..=10)
            .map(|i| {
                let t = i as f64 / 10.0;
                (o.p_at(t) - 1.0 / (2.0 - t)).abs()
            })
            .fold(0.0, f64::max);
        Ok(CheckReport::new("riccati_closed_form", worst, 1e-10, ""))
    }
}

/// Options of [`run_benchmark`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchOptions {
    /// Multiplies every tolerance.
    pub tol_scale: f64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { tol_scale: 1.0 }
    }
}

pub const BENCHMARKS: &[&str] = &["american_put", "brownian_bridge", "lq_steer"];

/// Runs a named benchmark end to end and returns its reports. Oracle
/// self-checks come first.
pub fn run_benchmark(name: &str, opts: &BenchOptions) -> Result<Vec<CheckReport>> {
    let reports = match name {
        "american_put" => bench_put()?,
        "brownian_bridge" => bench_bridge()?,
        "lq_steer" => bench_lq()?,
        other => return Err(SolverError::UnknownPreset(other.to_string())),
    };
    Ok(reports.into_iter().map(|r| r.scaled(opts.tol_scale)).collect())
}

fn bench_put() -> Result<Vec<CheckReport>> {
    let p: PutParams = presets::PUT;
    let oracle = american_put_oracle(p.r, p.sigma, p.strike)?;
    let mut out = oracle.self_checks();
    let pre = presets::american_put_log(p)?;
    let cfg = ValueConfig {
        left: EndCondition::Obstacle,
        right: EndCondition::Fixed(0.0),
        ..ValueConfig::default()
    };
    let v = solve_obstacle_vi(&pre.spec, &pre.boundary, &pre.grid, VIMode::Stationary { dt0: 0.01 }, &cfg)?;
    let b = v
        .free_boundary
        .as_ref()
        .and_then(|fb| fb[0])
        .map(f64::exp)
        .unwrap_or(f64::NAN);
    out.push(CheckReport::new(
        "free_boundary_rel",
        (b - oracle.b_star) / oracle.b_star,
        1e-2,
        format!("b = {}", fmt_num(b)),
    ));
    let g = pre.grid;
    let sup = (0..g.len())
        .map(|j| g.x(j).exp())
        .zip(v.frames[0].values())
        .filter(|(s, _)| *s <= 20.0 * p.strike)
        .map(|(s, val)| (-val - oracle.value(s)).abs())
        .fold(0.0, f64::max);
    out.push(CheckReport::new("value_sup", sup, 1e-2, "S <= 20K"));
    let c = v.complementarity.expect("obstacle solve reports complementarity");
    out.push(CheckReport::new("complementarity_generator", c.min_generator.min(0.0), 1e-6, ""));
    out.push(CheckReport::new("complementarity_gap", c.min_gap.min(0.0), 1e-6, ""));
    out.push(CheckReport::new("complementarity_product", c.max_product, 1e-8, ""));
    Ok(out)
}

/// Score layer used for the bridge: wide enough that the transformed
/// velocity stays moderate next to the boundary.
pub const BRIDGE_SCORE_LAYER: f64 = 0.1;

/// Largest `|OS5|` on the curve `c√(1−t)` over `t ∈ window`, with the
/// costate of stopping on that curve.
pub fn bridge_os5_on_curve(c: f64, window: (f64, f64)) -> Result<f64> {
    let pre = presets::brownian_bridge()?;
    let b = move |t: f64| c * (1.0 - t).max(0.0).sqrt();
    let boundary = StoppingBoundary::Above(map1(b));
    let fb = Feedback::Zero;
    let path = solve_fp(&pre.spec, &fb, &pre.rho0, &pre.grid, &pre.time, &boundary)?;
    let score_cfg = ScoreConfig {
        layer_width: Some(BRIDGE_SCORE_LAYER),
        ..ScoreConfig::default()
    };
    let scores = score_path(&path, &boundary, &score_cfg)?;
    let lam = costate_sweep(&pre.spec, &fb, &path, &scores, &boundary, 0.0, &CostateConfig::default())?;
    let prof = boundary_stopping_profile(&pre.spec, &fb, &lam, &b, BoundarySide::Above, 0.0, window)?;
    Ok(prof.iter().map(|p| p.1.abs()).fold(0.0, f64::max))
}

fn bench_bridge() -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    let root = solve_bridge_scale(0.5, 0.99)?;
    out.push(CheckReport::new("bridge_fixture_vs_root", root - BRIDGE_B, 1e-10, ""));
    out.push(CheckReport::new("bridge_pinned_end", bridge_boundary(1.0), 0.0, ""));
    out.push(CheckReport::new("bridge_start", bridge_boundary(0.0) - BRIDGE_B, 0.0, ""));
    let window = (0.0, 0.9);
    let at_b = bridge_os5_on_curve(BRIDGE_B, window)?;
    let off = bridge_os5_on_curve(1.1 * BRIDGE_B, window)?;
    out.push(CheckReport::new("os5_on_oracle_boundary", at_b, 5e-2, "t in [0, 0.9]"));
    out.push(CheckReport::new(
        "os5_ratio_oracle_to_perturbed",
        at_b / off,
        1.0,
        format!("perturbed max {}", fmt_num(off)),
    ));
    let (scale, converged) = bridge_fit(0.75)?;
    out.push(CheckReport::new(
        "fitted_scale_rel",
        scale / BRIDGE_B - 1.0,
        2e-2,
        format!("scale {} sweep converged {}", fmt_num(scale), converged),
    ));
    Ok(out)
}

/// Boundary-scale fit of the bridge by [`fb_sweep`] from `initial`.
pub fn bridge_fit(initial: f64) -> Result<(f64, bool)> {
    let pre = presets::brownian_bridge()?;
    let prob = SweepProblem {
        spec: &pre.spec,
        rho0: &pre.rho0,
        grid: pre.grid,
        time: pre.time,
        boundary: pre.boundary.clone(),
    };
    let cfg = SweepConfig {
        tol: 2e-2,
        max_iters: 30,
        score: ScoreConfig {
            layer_width: Some(BRIDGE_SCORE_LAYER),
            ..ScoreConfig::default()
        },
        ..SweepConfig::default()
    };
    let mode = TimeMode::BoundaryScale {
        shape: map1(|t: f64| (1.0 - t).max(0.0).sqrt()),
        side: BoundarySide::Above,
        initial,
        window: (0.0, 0.9),
    };
    let st = fb_sweep(&prob, &mode, &cfg)?;
    Ok((st.boundary_scale.unwrap_or(f64::NAN), st.converged))
}

/// Relative feedback error of a grid control against `−bP(t)x/r` over
/// `|x| ≤ 2`, `x ≠ 0`, at the control's time nodes.
pub fn lq_feedback_error(controls: &crate::model::ControlField, oracle: &RiccatiOracle, eta: f64) -> f64 {
    let LqParams { b, r, .. } = oracle.params;
    let g = controls.frames[0].grid();
    let mut worst = 0.0_f64;
    for (k, f) in controls.frames.iter().enumerate() {
        let t = controls.time.t(k);
        for j in 0..g.len() {
            let x = g.x(j);
            if x.abs() > 2.0 + 1e-12 || x.abs() < 0.25 {
                continue;
            }
            let exact = -b / r * oracle.costate(t, x, eta);
            worst = worst.max((f.values()[j] - exact).abs() / exact.abs().max(1e-12));
        }
    }
    worst
}

fn costate_error(costate: &crate::optimality::CostateField, oracle: &RiccatiOracle, eta: f64) -> f64 {
    let g = *costate.grid();
    let mut worst = 0.0_f64;
    for (k, f) in costate.frames.iter().enumerate() {
        let t = costate.time.t(k);
        for j in 0..g.len() {
            let x = g.x(j);
            if x.abs() > 2.0 + 1e-12 || x.abs() < 0.25 {
                continue;
            }
            let exact = oracle.costate(t, x, eta);
            worst = worst.max((f.values()[j] - exact).abs() / exact.abs().max(1e-12));
        }
    }
    worst
}

fn bench_lq() -> Result<Vec<CheckReport>> {
    let mut out = vec![RiccatiOracle::closed_form_check(1e-4)?];
    let oracle = lq_riccati_oracle(presets::LQ, 1e-4)?;
    let pre = presets::lq_steer(presets::LQ, None)?;
    let (p0, x0) = (oracle.p_at(0.0), 1.0);
    let ham = modified_hamiltonian(&pre.spec, 0.0, x0, oracle.feedback(0.0, x0), p0 * x0, p0);
    out.push(CheckReport::new("hamiltonian_t0_x1", ham - oracle.hamiltonian(0.0, x0), 1e-3, ""));

    let prob = SweepProblem {
        spec: &pre.spec,
        rho0: &pre.rho0,
        grid: pre.grid,
        time: pre.time,
        boundary: pre.boundary.clone(),
    };
    let cfg = SweepConfig {
        max_iters: 50,
        ..SweepConfig::default()
    };
    let st = fb_sweep(&prob, &TimeMode::FixedHorizon, &cfg)?;
    out.push(CheckReport::new(
        "sweep_iterations",
        st.iterations() as f64,
        50.0,
        format!("converged {}", st.converged),
    ));
    out.push(CheckReport::new("os1_max", st.os1, 1e-3, ""));
    out.push(CheckReport::new("os2_defect", st.os2, 1e-3, ""));
    out.push(CheckReport::new("os4", st.os4, 1e-3, "no constraint"));
    out.push(CheckReport::new("feedback_rel", lq_feedback_error(&st.controls, &oracle, 0.0), 1e-2, "0.25 <= |x| <= 2"));
    out.push(CheckReport::new("costate_rel", costate_error(&st.costate, &oracle, 0.0), 1e-2, "0.25 <= |x| <= 2"));

    let pre_m = presets::lq_steer(presets::LQ, Some(1.0))?;
    let prob_m = SweepProblem {
        spec: &pre_m.spec,
        rho0: &pre_m.rho0,
        grid: pre_m.grid,
        time: pre_m.time,
        boundary: pre_m.boundary.clone(),
    };
    let cfg_m = SweepConfig {
        max_iters: 200,
        ..SweepConfig::default()
    };
    let sm = fb_sweep(&prob_m, &TimeMode::FixedHorizon, &cfg_m)?;
    let last = sm.path.frames.last().expect("non-empty path");
    let mean = terminal_mean(last);
    let (m0, _) = pre_m.rho0.moments().unwrap_or((2.0, 0.25));
    let eta_oracle = oracle.mean_multiplier(m0, 1.0)?;
    out.push(CheckReport::new(
        "constrained_terminal_mean",
        mean - 1.0,
        1e-2,
        format!("converged {}", sm.converged),
    ));
    out.push(CheckReport::new(
        "constrained_eta_rel",
        (sm.multiplier.eta - eta_oracle) / eta_oracle,
        1e-2,
        format!("eta {} oracle {}", fmt_num(sm.multiplier.eta), fmt_num(eta_oracle)),
    ));
    out.push(CheckReport::new("constrained_os4", sm.os4, 1e-2, ""));
    Ok(out)
}

fn terminal_mean(f: &Field) -> f64 {
    let g = f.grid();
    let xs: Vec<f64> = (0..g.len()).map(|j| g.x(j) * f.values()[j]).collect();
    crate::grid::trapezoid_values(&xs, g.dx()) / crate::grid::trapezoid(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn put_oracle_examples() {
        let o = american_put_oracle(0.05, 0.4, 1.0).unwrap();
        assert!((o.b_star - 0.1 / 0.26).abs() < 1e-12);
        assert!((o.value(o.b_star) - (1.0 - o.b_star)).abs() < 1e-15);
        assert!((o.derivative(o.b_star) + 1.0).abs() < 1e-8);
        // numerical derivative from the continuation side
        let h = 1e-7;
        let fd = (o.value(o.b_star + h) - o.value(o.b_star)) / h;
        assert!((fd + 1.0).abs() < 1e-5);
        assert!(o.self_checks().iter().all(|r| r.pass));
        assert!(american_put_oracle(0.0, 0.4, 1.0).is_err());
    }

    #[test]
    fn bridge_fixture_regeneration() {
        let b = solve_bridge_scale(0.5, 0.99).unwrap();
        assert!((b - BRIDGE_B).abs() < 1e-10, "regenerated {b:.15}");
        assert!(BRIDGE_B > 0.80 && BRIDGE_B < 0.88);
        assert_eq!(bridge_boundary(1.0), 0.0);
        assert_eq!(bridge_boundary(0.0), BRIDGE_B);
        assert!(matches!(solve_bridge_scale(0.0, 0.5), Err(SolverError::RootNotBracketed { .. })));
        assert!(bridge_scaled_residual(BRIDGE_B).abs() < 1e-10);
    }

    /// Independent check of the fixture: on a fine grid, solve
    /// `W'' − zW' − W = 0` on `[z_min, c]` with `W(c) = c` for trial
    /// boundaries `c`, and maximise `W(0)` over `c`.
    #[test]
    fn bridge_fixture_matches_grid_free_boundary() {
        let w0 = |c: f64| -> f64 {
            let (z0, n) = (-10.0, 20_000usize);
            let h = (c - z0) / n as f64;
            let mut lower = vec![0.0; n + 1];
            let mut diag = vec![0.0; n + 1];
            let mut upper = vec![0.0; n + 1];
            let mut rhs = vec![0.0; n + 1];
            // far left: W ~ k/|z|, so W' = −W/z
            diag[0] = -1.0 / h + 1.0 / z0;
            upper[0] = 1.0 / h;
            for j in 1..n {
                let z = z0 + j as f64 * h;
                lower[j] = 1.0 / (h * h) + z / (2.0 * h);
                diag[j] = -2.0 / (h * h) - 1.0;
                upper[j] = 1.0 / (h * h) - z / (2.0 * h);
            }
            diag[n] = 1.0;
            rhs[n] = c;
            crate::grid::solve_tridiagonal(&lower, &diag, &upper, &mut rhs);
            let s = -z0 / h;
            let j = s.floor() as usize;
            let w = s - j as f64;
            rhs[j] * (1.0 - w) + rhs[j + 1] * w
        };
        // golden-section search for the maximiser
        let (mut a, mut b) = (0.6, 1.0);
        let g = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..60 {
            let (c1, c2) = (b - g * (b - a), a + g * (b - a));
            if w0(c1) > w0(c2) {
                b = c2;
            } else {
                a = c1;
            }
        }
        let c = 0.5 * (a + b);
        assert!((c - BRIDGE_B).abs() < 2e-3, "grid free boundary {c}");
    }

    #[test]
    fn riccati_examples() {
        assert!(RiccatiOracle::closed_form_check(1e-4).unwrap().pass);
        let o = lq_riccati_oracle(
            LqParams {
                a: 0.0,
                b: 1.0,
                sigma: 0.0,
                q: 0.0,
                r: 1.0,
                qf: 1.0,
                horizon: 1.0,
            },
            1e-4,
        )
        .unwrap();
        assert!((o.p_at(0.0) - 0.5).abs() < 1e-12);
        let z = lq_riccati_oracle(
            LqParams {
                q: 0.0,
                qf: 0.0,
                ..presets::LQ
            },
            1e-4,
        )
        .unwrap();
        assert!(z.p.iter().all(|p| *p == 0.0));
        assert_eq!(z.feedback(0.3, 1.7), 0.0);
        let l = lq_riccati_oracle(presets::LQ, 1e-4).unwrap();
        for &(t, x) in &[(0.0, 1.0), (0.5, 0.3), (0.9, 2.0)] {
            assert_eq!(l.feedback(t, -x), -l.feedback(t, x));
        }
        assert!(lq_riccati_oracle(LqParams { r: 0.0, ..presets::LQ }, 1e-4).is_err());
    }

    #[test]
    fn constrained_shooting_hits_target() {
        let o = lq_riccati_oracle(presets::LQ, 1e-4).unwrap();
        let eta = o.mean_multiplier(2.0, 1.0).unwrap();
        assert!((o.terminal_mean(2.0, eta) - 1.0).abs() < 1e-10);
        // without the constraint the mean undershoots 1, so the multiplier pushes up
        assert!(o.terminal_mean(2.0, 0.0) < 1.0 && eta > 0.0);
    }

    #[test]
    fn unknown_benchmark() {
        assert!(matches!(
            run_benchmark("nope", &BenchOptions::default()),
            Err(SolverError::UnknownPreset(_))
        ));
    }
}
