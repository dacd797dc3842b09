//! Reusable numerical certificates: Stein-identity residuals, agreement of
//! the three marginal representations, and the value decomposition check.

use std::fmt::Write as _;
use std::io::Write;

use crate::error::Result;
use crate::fokker_planck::solve_fp;
use crate::grid::{fmt_num, gradient_central, trapezoid_values, Field, Grid1D, TimeGrid};
use crate::model::{Feedback, InitialDensity, ProblemSpec, StoppingBoundary};
use crate::optimality::CostateField;
use crate::presets::Preset;
use crate::sde_mc::{estimate_cost, simulate_killed, wasserstein1, wasserstein1_sample_field, McConfig};
use crate::transform::{
    advect_particles, score_path, velocity_field, ParticleEnsemble, ScoreConfig, StopRule,
};
use crate::value_hjb::{distributional_value, solve_hjb_dirichlet, ValueConfig, ValueField};

/// One named check: passes when `|value| ≤ tolerance`.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub notes: String,
}

impl CheckReport {
    pub fn new(name: impl Into<String>, value: f64, tolerance: f64, notes: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            pass: value.abs() <= tolerance,
            notes: notes.into(),
        }
    }

    /// Scales the tolerance, re-evaluating `pass`.
    pub fn scaled(mut self, factor: f64) -> Self {
        self.tolerance *= factor;
        self.pass = self.value.abs() <= self.tolerance;
        self
    }
}

pub fn all_pass(reports: &[CheckReport]) -> bool {
    reports.iter().all(|r| r.pass)
}

/// Aligned plain-text table.
pub fn format_table(reports: &[CheckReport]) -> String {
    let w = reports.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
    let mut s = String::new();
    let _ = writeln!(s, "{:<w$}  {:>13}  {:>11}  {:<4}  notes", "check", "value", "tolerance", "pass");
    for r in reports {
        let _ = writeln!(
            s,
            "{:<w$}  {:>13.6e}  {:>11.3e}  {:<4}  {}",
            r.name,
            r.value,
            r.tolerance,
            if r.pass { "yes" } else { "NO" },
            r.notes
        );
    }
    s
}

/// CSV with header `benchmark,check,value,tolerance,pass`.
pub fn write_reports_csv<W: Write>(mut out: W, benchmark: &str, reports: &[CheckReport]) -> std::io::Result<()> {
    writeln!(out, "benchmark,check,value,tolerance,pass")?;
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{}",
            benchmark,
            r.name,
            fmt_num(r.value),
            fmt_num(r.tolerance),
            r.pass
        )?;
    }
    Ok(())
}

/// `∫ (ζ·∂ₓlog ρ + ζ')ρ dx`, with `ρ·∂ₓlog ρ` taken as `∂ₓρ` so the
/// integrand stays finite where `ρ` vanishes.
pub fn stein_residual(rho: &Field, zeta: impl Fn(f64) -> f64, dzeta: impl Fn(f64) -> f64) -> f64 {
    let g = rho.grid();
    let drho = gradient_central(rho);
    let v: Vec<f64> = (0..g.len())
        .map(|j| {
            let x = g.x(j);
            zeta(x) * drho.values()[j] + dzeta(x) * rho.values()[j]
        })
        .collect();
    trapezoid_values(&v, g.dx())
}

/// Settings of [`marginal_equivalence_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalConfig {
    pub checkpoints: Vec<f64>,
    pub particles: usize,
    pub seed: u64,
    pub w1_tol: f64,
    pub mass_tol: f64,
    pub score: ScoreConfig,
}

impl Default for MarginalConfig {
    fn default() -> Self {
        Self {
            checkpoints: vec![0.5, 1.0, 2.0],
            particles: 100_000,
            seed: 7,
            w1_tol: 0.02,
            mass_tol: 0.02,
            score: ScoreConfig::default(),
        }
    }
}

/// Uncontrolled marginals at each checkpoint from Monte Carlo, the density
/// solve and the transported ensemble (quantile-placed particles moved
/// along `f̃`), compared pairwise in W1. With an absorbing boundary the
/// alive masses are compared as well (W1 is then between the normalised
/// alive laws).
pub fn marginal_equivalence_report(
    spec: &ProblemSpec,
    rho0: &InitialDensity,
    grid: &Grid1D,
    dt: f64,
    boundary: &StoppingBoundary,
    cfg: &MarginalConfig,
) -> Result<Vec<CheckReport>> {
    let horizon = cfg.checkpoints.iter().cloned().fold(0.0, f64::max);
    let time = TimeGrid::with_step(0.0, horizon, dt)?;
    let fb = Feedback::Zero;
    let path = solve_fp(spec, &fb, rho0, grid, &time, boundary)?;
    let scores = score_path(&path, boundary, &cfg.score)?;
    let vel = velocity_field(spec, &fb, &path, &scores);
    let mut ens = ParticleEnsemble::from_quantiles(rho0, cfg.particles, 0.0);
    ens.stop_outside(boundary);
    let rule = StopRule {
        boundary,
        assignment: None,
    };
    let absorbing = boundary.is_absorbing();
    let mut out = Vec::new();
    let mut sorted = cfg.checkpoints.clone();
    sorted.sort_by(f64::total_cmp);
    for &t in &sorted {
        let mc = simulate_killed(spec, &fb, rho0, boundary, &McConfig::new(cfg.particles, dt, cfg.seed, t)?)?;
        advect_particles(&mut ens, &vel, rule, dt, t)?;
        let fp = path.frame_at(t);
        let alive = mc.alive_positions();
        let chars = ens.alive_positions();
        let tag = format!("{t}");
        out.push(CheckReport::new(
            format!("w1_mc_fp@{tag}"),
            wasserstein1_sample_field(&alive, fp)?,
            cfg.w1_tol,
            format!("{} paths", cfg.particles),
        ));
        out.push(CheckReport::new(
            format!("w1_mc_char@{tag}"),
            wasserstein1(&alive, &chars)?,
            cfg.w1_tol,
            "",
        ));
        out.push(CheckReport::new(
            format!("w1_fp_char@{tag}"),
            wasserstein1_sample_field(&chars, fp)?,
            cfg.w1_tol,
            "",
        ));
        if absorbing {
            let fp_mass = path.alive_mass[time.nearest(t)];
            out.push(CheckReport::new(
                format!("alive_mc_fp@{tag}"),
                mc.survival_fraction() - fp_mass,
                cfg.mass_tol,
                format!("fp alive {}", fmt_num(fp_mass)),
            ));
            out.push(CheckReport::new(
                format!("alive_char_fp@{tag}"),
                ens.alive_fraction() - fp_mass,
                cfg.mass_tol,
                "",
            ));
        }
    }
    Ok(out)
}

/// `|∫V(0,·)dμ₀ − MC mean cost|` under the feedback of the value solve,
/// against `3·SE + rel·|MC mean|`.
pub fn decomposition_report(preset: &Preset, paths: usize, seed: u64, mc_dt: f64, rel: f64) -> Result<CheckReport> {
    let p = preset;
    let value = solve_hjb_dirichlet(&p.spec, &p.boundary, &p.grid, &p.time, &ValueConfig::default())?;
    let (mu0, _) = p.rho0.project(&p.grid);
    let v0 = distributional_value(&value, &mu0, p.time.t0());
    let mut mc_cfg = McConfig::new(paths, mc_dt, seed, p.time.t1())?;
    mc_cfg.t0 = p.time.t0();
    let mc = simulate_killed(&p.spec, &value.feedback(), &p.rho0, &p.boundary, &mc_cfg)?;
    let (mean, se) = estimate_cost(&mc)?;
    Ok(CheckReport::new(
        "decomposition",
        (v0 - mean).abs(),
        3.0 * se + rel * mean.abs(),
        format!("value {} mc {} se {}", fmt_num(v0), fmt_num(mean), fmt_num(se)),
    ))
}

/// `sup |λ − ∂ₓV|` over common time nodes and grid nodes at least
/// `margin` away from both grid ends. `∂ₓV` is the central difference of
/// each value frame; the two fields must share grid and time nodes.
pub fn costate_value_gap(costate: &CostateField, value: &ValueField, margin: f64) -> Result<f64> {
    let g = *costate.grid();
    if *value.grid() != g || costate.frames.len() != value.frames.len() {
        return Err(crate::error::SolverError::invalid("value", "must share the costate grid and time nodes"));
    }
    let mut worst = 0.0_f64;
    for (lam, v) in costate.frames.iter().zip(&value.frames) {
        let dv = gradient_central(v);
        for j in 0..g.len() {
            let x = g.x(j);
            if x - g.x_min() < margin || g.x_max() - x < margin {
                continue;
            }
            worst = worst.max((lam.values()[j] - dv.values()[j]).abs());
        }
    }
    Ok(worst)
}

/// Stein residuals of `N(0,1)` for `ζ ∈ {1, x, x²}` on `[−10, 10]`, plus
/// the truncated control: `N(0,1)` cut to `[−1, 1.5]` with `ζ = 1`, whose
/// residual must match the boundary term `ρ(1.5) − ρ(−1)` to within 5%.
pub fn stein_report() -> Result<Vec<CheckReport>> {
    let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let g = Grid1D::with_spacing(-10.0, 10.0, 0.01)?;
    let rho = Field::from_fn(g, pdf);
    let mut out = vec![
        CheckReport::new("stein_zeta_1", stein_residual(&rho, |_| 1.0, |_| 0.0), 1e-4, ""),
        CheckReport::new("stein_zeta_x", stein_residual(&rho, |x| x, |_| 1.0), 1e-4, ""),
        CheckReport::new("stein_zeta_x2", stein_residual(&rho, |x| x * x, |x| 2.0 * x), 1e-4, ""),
    ];
    let gt = Grid1D::with_spacing(-1.0, 1.5, 1e-3)?;
    let cut = Field::from_fn(gt, pdf);
    let direct = pdf(1.5) - pdf(-1.0);
    let r = stein_residual(&cut, |_| 1.0, |_| 0.0);
    out.push(CheckReport::new(
        "stein_truncated_rel",
        (r - direct) / direct,
        0.05,
        format!("residual {} boundary term {}", fmt_num(r), fmt_num(direct)),
    ));
    Ok(out)
}

/// Alive plus absorbed mass against one, and the alive mass at the end
/// against `erf(x₀/√(2T))` for Brownian motion killed at 0.
pub fn mass_balance_report(preset: &Preset, x0: f64) -> Result<Vec<CheckReport>> {
    let p = preset;
    let path = solve_fp(&p.spec, &Feedback::Zero, &p.rho0, &p.grid, &p.time, &p.boundary)?;
    let balance = crate::fokker_planck::mass_balance(&path)
        .iter()
        .fold(0.0_f64, |m, r| m.max(r.abs()));
    let horizon = p.time.t1() - p.time.t0();
    let exact = statrs::function::erf::erf(x0 / (2.0 * horizon).sqrt());
    let alive = *path.alive_mass.last().expect("non-empty path");
    Ok(vec![
        CheckReport::new("alive_plus_absorbed", balance, 1e-2, "max over time nodes"),
        CheckReport::new(
            "alive_end_rel",
            (alive - exact) / exact,
            1e-2,
            format!("alive {} reflection {}", fmt_num(alive), fmt_num(exact)),
        ),
    ])
}

/// Itô recovery on the OU preset to horizon 0.5 for `g = 2x + 1` and
/// `g = x³ + x`.
pub fn ito_report(particles: usize) -> Result<Vec<CheckReport>> {
    use crate::model::map1;
    use crate::transform::{ito_recovery_residual, ItoRecoverySetup, StateMap};
    let p = crate::presets::ou()?;
    let time = TimeGrid::with_step(0.0, 0.5, p.time.dt())?;
    let affine = StateMap {
        g: map1(|x| 2.0 * x + 1.0),
        dg: map1(|_| 2.0),
        d2g: map1(|_| 0.0),
    };
    let cubic = StateMap {
        g: map1(|x| x * x * x + x),
        dg: map1(|x| 3.0 * x * x + 1.0),
        d2g: map1(|x| 6.0 * x),
    };
    let cases = [
        ("ito_affine", affine, Grid1D::with_spacing(-15.0, 17.0, 0.01)?),
        ("ito_cubic", cubic, Grid1D::with_spacing(-60.0, 200.0, 0.02)?),
    ];
    cases
        .into_iter()
        .map(|(name, map, y_grid)| {
            let setup = ItoRecoverySetup {
                x_grid: p.grid,
                y_grid,
                time,
                particles,
            };
            let r = ito_recovery_residual(&p.spec, &Feedback::Zero, &p.rho0, &map, &setup)?;
            Ok(CheckReport::new(name, r, 0.05, "W1 at t = 0.5"))
        })
        .collect()
}

/// Costate of a fixed-horizon sweep against the gradient of the value
/// solved on the same nodes, away from the grid ends by `margin`. The
/// preset is solved without its stopping boundary.
pub fn duality_report(preset: &Preset, cfg: &crate::optimality::SweepConfig, margin: f64) -> Result<Vec<CheckReport>> {
    use crate::optimality::{fb_sweep, SweepProblem, TimeMode};
    let p = preset;
    let none = StoppingBoundary::None;
    let prob = SweepProblem {
        spec: &p.spec,
        rho0: &p.rho0,
        grid: p.grid,
        time: p.time,
        boundary: none.clone(),
    };
    let st = fb_sweep(&prob, &TimeMode::FixedHorizon, cfg)?;
    let value = solve_hjb_dirichlet(&p.spec, &none, &p.grid, &p.time, &ValueConfig::default())?;
    let gap = costate_value_gap(&st.costate, &value, margin)?;
    Ok(vec![CheckReport::new(
        "costate_minus_value_gradient",
        gap,
        3e-2,
        format!("sweep converged {} after {} passes", st.converged, st.iterations()),
    )])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn normal() -> Field {
        let g = Grid1D::new(-10.0, 10.0, 2001).unwrap();
        Field::from_fn(g, |x| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt())
    }

    #[test]
    fn stein_on_gaussian() {
        let rho = normal();
        assert!(stein_residual(&rho, |_| 1.0, |_| 0.0).abs() < 1e-6);
        assert!(stein_residual(&rho, |x| x, |_| 1.0).abs() < 1e-4);
        assert!(stein_residual(&rho, |x| x * x, |x| 2.0 * x).abs() < 1e-4);
    }

    #[test]
    fn truncated_density_leaves_boundary_term() {
        let g = Grid1D::new(-1.0, 1.5, 2501).unwrap();
        let rho = Field::from_fn(g, |x| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt());
        let direct = rho.values()[g.len() - 1] - rho.values()[0];
        let r = stein_residual(&rho, |_| 1.0, |_| 0.0);
        assert!(direct.abs() > 1e-2);
        assert!((r - direct).abs() <= 0.05 * direct.abs());
    }

    #[test]
    fn stein_is_linear_in_zeta() {
        let rho = normal();
        let r1 = stein_residual(&rho, |x| x.sin(), |x| x.cos());
        let r2 = stein_residual(&rho, |x| x * x * x, |x| 3.0 * x * x);
        let r = stein_residual(&rho, |x| 2.0 * x.sin() - 0.5 * x * x * x, |x| 2.0 * x.cos() - 1.5 * x * x);
        assert!((r - (2.0 * r1 - 0.5 * r2)).abs() < 1e-12);
    }

    #[test]
    fn report_pass_rule() {
        assert!(CheckReport::new("a", -0.01, 0.01, "").pass);
        assert!(!CheckReport::new("a", 0.02, 0.01, "").pass);
        assert!(!CheckReport::new("a", f64::NAN, 0.01, "").pass);
        let t = format_table(&[CheckReport::new("a", 1.0, 2.0, "n")]);
        assert!(t.lines().count() == 2 && t.contains("yes"));
        let mut csv = Vec::new();
        write_reports_csv(&mut csv, "b", &[CheckReport::new("a", 0.5, 1.0, "")]).unwrap();
        assert_eq!(
            String::from_utf8(csv).unwrap(),
            format!("benchmark,check,value,tolerance,pass\nb,a,{},{},true\n", fmt_num(0.5), fmt_num(1.0))
        );
    }
}
