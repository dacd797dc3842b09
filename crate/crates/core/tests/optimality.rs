use density_steer::bench::{bridge_os5_on_curve, lq_feedback_error, lq_riccati_oracle, BRIDGE_B};
use density_steer::diagnostics::{costate_value_gap, duality_report};
use density_steer::grid::{bisect, Grid1D, TimeGrid};
use density_steer::model::{map2, ControlForm, InitialDensity, ProblemSpec, StoppingBoundary};
use density_steer::optimality::{fb_sweep, SweepConfig, SweepProblem, TimeMode};
use density_steer::presets::{self, Preset};
use density_steer::value_hjb::{solve_hjb_dirichlet, ValueConfig};

fn problem(p: &Preset) -> SweepProblem<'_> {
    SweepProblem {
        spec: &p.spec,
        rho0: &p.rho0,
        grid: p.grid,
        time: p.time,
        boundary: p.boundary.clone(),
    }
}

#[test]
fn lq_sweep_recovers_riccati_feedback_and_costate() {
    let p = presets::lq_steer(presets::LQ, None).unwrap();
    let cfg = SweepConfig {
        max_iters: 50,
        ..SweepConfig::default()
    };
    let st = fb_sweep(&problem(&p), &TimeMode::FixedHorizon, &cfg).unwrap();
    assert!(st.converged && st.iterations() <= 50, "{:?}", st.history.last());
    assert!(st.os1.max(st.os2).max(st.os4.abs()) <= 1e-3);
    let oracle = lq_riccati_oracle(presets::LQ, 1e-4).unwrap();
    assert!(lq_feedback_error(&st.controls, &oracle, 0.0) <= 1e-2);
    for &t in &[0.0, 0.5, 1.0] {
        for &x in &[-2.0, -1.0, 0.5, 1.5, 2.0] {
            let exact = oracle.costate(t, x, 0.0);
            assert!((st.costate.eval(t, x) - exact).abs() <= 1e-2 * exact.abs(), "t={t} x={x}");
        }
    }
    // the objective never rose at a fixed multiplier
    assert!(st.flagged.is_empty());
}

#[test]
fn mean_constraint_is_met_on_a_coarse_grid() {
    let mut p = presets::lq_steer(presets::LQ, Some(1.0)).unwrap();
    p.grid = Grid1D::with_spacing(-4.0, 6.0, 0.02).unwrap();
    p.time = TimeGrid::with_step(0.0, 1.0, 2e-3).unwrap();
    let st = fb_sweep(&problem(&p), &TimeMode::FixedHorizon, &SweepConfig::default()).unwrap();
    assert!(st.converged);
    assert!(st.os4.abs() <= 1e-2);
    let oracle = lq_riccati_oracle(presets::LQ, 1e-4).unwrap();
    let eta = oracle.mean_multiplier(2.0, 1.0).unwrap();
    assert!((st.multiplier.eta - eta).abs() <= 2e-2 * eta, "{} vs {eta}", st.multiplier.eta);
}

#[test]
fn costate_is_the_value_gradient_on_a_coarse_grid() {
    let mut p = presets::ou_cost().unwrap();
    p.grid = Grid1D::with_spacing(-3.0, 4.0, 0.02).unwrap();
    p.time = TimeGrid::with_step(0.0, 1.0, 2e-3).unwrap();
    let r = duality_report(&p, &SweepConfig::default(), 0.1).unwrap();
    assert!(r[0].pass, "{r:?}");
}

#[test]
fn value_gap_needs_matching_nodes() {
    let p = presets::ou_cost().unwrap();
    let none = StoppingBoundary::None;
    let a = solve_hjb_dirichlet(&p.spec, &none, &p.grid, &TimeGrid::new(0.0, 1.0, 10).unwrap(), &ValueConfig::default())
        .unwrap();
    let coarse = Grid1D::with_spacing(-3.0, 4.0, 0.05).unwrap();
    let st = fb_sweep(
        &SweepProblem {
            spec: &p.spec,
            rho0: &p.rho0,
            grid: coarse,
            time: TimeGrid::new(0.0, 1.0, 10).unwrap(),
            boundary: none,
        },
        &TimeMode::FixedHorizon,
        &SweepConfig {
            max_iters: 2,
            ..SweepConfig::default()
        },
    )
    .unwrap();
    assert!(costate_value_gap(&st.costate, &a, 0.1).is_err());
}

/// `f = u`, `L = ½u² + κ`, `Φ = ½x²` from `N(m, v)`: the optimal cost with
/// horizon `T` is `½(m² + v)/(1 + T) + ½σ² ln(1 + T) + κT`.
#[test]
fn common_stopping_time_minimises_the_closed_form_cost() {
    let (sigma, kappa, m, v) = (0.5, 0.5, 2.0, 0.25);
    let spec = ProblemSpec::builder("cs")
        .drift(|_, _, u| u)
        .drift_dx(|_, _, _| 0.0)
        .drift_du(|_, _, _| 1.0)
        .running_cost(move |_, _, u| 0.5 * u * u + kappa)
        .running_cost_dx(|_, _, _| 0.0)
        .running_cost_du(|_, _, u| u)
        .terminal_cost(|_, x| 0.5 * x * x)
        .terminal_cost_dx(|_, x| x)
        .terminal_cost_dt(|_, _| 0.0)
        .sigma(sigma)
        .control_form(ControlForm::AffineQuadratic {
            gain: map2(|_, _| 1.0),
            weight: map2(|_, _| 1.0),
        })
        .build()
        .unwrap();
    let dj = |t: f64| -0.5 * (m * m + v) / (1.0 + t).powi(2) + 0.5 * sigma * sigma / (1.0 + t) + kappa;
    let t_star = bisect(dj, 0.1, 3.0, 1e-12).unwrap();
    let rho0 = InitialDensity::gaussian(m, v).unwrap();
    let prob = SweepProblem {
        spec: &spec,
        rho0: &rho0,
        grid: Grid1D::with_spacing(-4.0, 6.0, 0.02).unwrap(),
        time: TimeGrid::with_step(0.0, 2.0, 2e-3).unwrap(),
        boundary: StoppingBoundary::None,
    };
    let st = fb_sweep(
        &prob,
        &TimeMode::CommonTime {
            lo: 0.2,
            hi: 2.0,
            initial: 0.5,
        },
        &SweepConfig::default(),
    )
    .unwrap();
    let tau = st.assignment.tau(0.0);
    assert!((tau - t_star).abs() <= 1e-2, "tau {tau} vs {t_star}");
    assert!(st.os5.abs() <= 1e-2);
}

#[test]
fn bridge_stopping_residual_prefers_the_oracle_boundary() {
    let at_b = bridge_os5_on_curve(BRIDGE_B, (0.0, 0.9)).unwrap();
    let off = bridge_os5_on_curve(1.1 * BRIDGE_B, (0.0, 0.9)).unwrap();
    assert!(at_b <= 5e-2, "{at_b}");
    assert!(off > at_b, "{off} vs {at_b}");
}

#[test]
fn uncontrolled_sweep_stops_after_one_pass() {
    let p = presets::ou().unwrap();
    let mut p = p;
    p.time = TimeGrid::with_step(0.0, 0.5, 1e-2).unwrap();
    p.grid = Grid1D::with_spacing(-8.0, 8.0, 0.05).unwrap();
    let st = fb_sweep(&problem(&p), &TimeMode::FixedHorizon, &SweepConfig::default()).unwrap();
    assert_eq!(st.iterations(), 1);
}
