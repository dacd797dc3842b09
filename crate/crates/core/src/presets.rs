//! Named problem set-ups shared by the tests, the benchmarks and the CLI.
//! Parameters are our own choices where none are customary.

use crate::error::{Result, SolverError};
use crate::grid::{Grid1D, TimeGrid};
use crate::model::{map1, map2, ControlForm, InitialDensity, ProblemSpec, StoppingBoundary};

/// A problem together with its default discretisation.
#[derive(Debug, Clone)]
pub struct Preset {
    pub id: &'static str,
    pub spec: ProblemSpec,
    pub rho0: InitialDensity,
    pub grid: Grid1D,
    pub time: TimeGrid,
    pub boundary: StoppingBoundary,
}

pub const PRESET_IDS: &[&str] = &[
    "ou",
    "integrator",
    "american_put_log",
    "brownian_bridge",
    "lq_steer",
    "lq_steer_mean",
    "ou_cost",
    "half_line",
];

/// Looks a preset up by id.
pub fn preset(id: &str) -> Result<Preset> {
    match id {
        "ou" => ou(),
        "integrator" => integrator(),
        "american_put_log" => american_put_log(PUT),
        "brownian_bridge" => brownian_bridge(),
        "lq_steer" => lq_steer(LQ, None),
        "lq_steer_mean" => lq_steer(LQ, Some(1.0)),
        "ou_cost" => ou_cost(),
        "half_line" => half_line(),
        other => Err(SolverError::UnknownPreset(other.to_string())),
    }
}

/// `dx = −x dt + √2 dW`, `ρ₀ = N(2, 0.25)`, no stopping.
pub fn ou() -> Result<Preset> {
    Ok(Preset {
        id: "ou",
        spec: ProblemSpec::builder("ou")
            .drift(|_, x, _| -x)
            .drift_dx(|_, _, _| -1.0)
            .sigma(2f64.sqrt())
            .build()?,
        rho0: InitialDensity::gaussian(2.0, 0.25)?,
        grid: Grid1D::with_spacing(-8.0, 8.0, 0.01)?,
        time: TimeGrid::with_step(0.0, 2.0, 1e-3)?,
        boundary: StoppingBoundary::None,
    })
}

/// Nearly deterministic drift `dx = (1 − x) dt + 10⁻⁶ dW`.
pub fn integrator() -> Result<Preset> {
    Ok(Preset {
        id: "integrator",
        spec: ProblemSpec::builder("integrator")
            .drift(|_, x, _| 1.0 - x)
            .drift_dx(|_, _, _| -1.0)
            .sigma(1e-6)
            .build()?,
        rho0: InitialDensity::gaussian(0.0, 0.25)?,
        grid: Grid1D::with_spacing(-3.0, 3.0, 0.005)?,
        time: TimeGrid::with_step(0.0, 1.0, 1e-3)?,
        boundary: StoppingBoundary::None,
    })
}

/// Standard Brownian motion started near 1 and killed at 0.
pub fn half_line() -> Result<Preset> {
    Ok(Preset {
        id: "half_line",
        spec: ProblemSpec::builder("half_line").sigma(1.0).build()?,
        rho0: InitialDensity::gaussian(1.0, 0.03f64.powi(2))?,
        grid: Grid1D::with_spacing(0.0, 8.0, 0.005)?,
        time: TimeGrid::with_step(0.0, 1.0, 1e-3)?,
        boundary: StoppingBoundary::below_const(0.0),
    })
}

/// Perpetual put parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PutParams {
    pub r: f64,
    pub sigma: f64,
    pub strike: f64,
}

pub const PUT: PutParams = PutParams {
    r: 0.05,
    sigma: 0.4,
    strike: 1.0,
};

/// Perpetual American put in `x = log S`, in min-cost form: the payoff
/// enters as `Φ = −(K − eˣ)⁺` and the value is the negated option price.
pub fn american_put_log(p: PutParams) -> Result<Preset> {
    let PutParams { r, sigma, strike } = p;
    Ok(Preset {
        id: "american_put_log",
        spec: ProblemSpec::builder("american_put_log")
            .drift(move |_, _, _| r - 0.5 * sigma * sigma)
            .sigma(sigma)
            .discount(r)
            .terminal_cost(move |_, x: f64| -(strike - x.exp()).max(0.0))
            .build()?,
        rho0: InitialDensity::gaussian(0.0, 0.04)?,
        grid: Grid1D::with_spacing(0.01f64.ln(), 1e4f64.ln(), 0.01)?,
        time: TimeGrid::with_step(0.0, 1.0, 0.01)?,
        boundary: StoppingBoundary::None,
    })
}

/// Last time node of the bridge preset; the bridge drift is singular at 1.
pub const BRIDGE_T_END: f64 = 0.999;

/// Brownian bridge pinned at 0 at time 1, stopped to maximise `x_τ`
/// (min-cost form `Φ = −x`). The start is smeared to `N(0, 0.1)` so that
/// the density solve is resolvable from the first step.
pub fn brownian_bridge() -> Result<Preset> {
    Ok(Preset {
        id: "brownian_bridge",
        spec: ProblemSpec::builder("brownian_bridge")
            .drift(|t, x, _| -x / (1.0 - t))
            .drift_dx(|t, _, _| -1.0 / (1.0 - t))
            .sigma(1.0)
            .terminal_cost(|_, x| -x)
            .terminal_cost_dx(|_, _| -1.0)
            .terminal_cost_dt(|_, _| 0.0)
            .build()?,
        rho0: InitialDensity::gaussian(0.0, 0.1)?,
        grid: Grid1D::with_spacing(-3.0, 1.5, 2e-3)?,
        time: TimeGrid::with_step(0.0, BRIDGE_T_END, 2e-4)?,
        boundary: StoppingBoundary::None,
    })
}

/// Scalar linear-quadratic data `f = a·x + b·u`, `L = ½(q·x² + r·u²)`,
/// `Φ = ½·q_f·x²` on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LqParams {
    pub a: f64,
    pub b: f64,
    pub sigma: f64,
    pub q: f64,
    pub r: f64,
    pub qf: f64,
    pub horizon: f64,
}

pub const LQ: LqParams = LqParams {
    a: 0.5,
    b: 1.0,
    sigma: 0.5,
    q: 1.0,
    r: 1.0,
    qf: 1.0,
    horizon: 1.0,
};

/// LQ steering from `N(2, 0.25)`; with `target_mean` the terminal
/// constraint `E[x_T] = m` is added as `Ψ = x − m`.
pub fn lq_steer(p: LqParams, target_mean: Option<f64>) -> Result<Preset> {
    let LqParams {
        a,
        b,
        sigma,
        q,
        r,
        qf,
        horizon,
    } = p;
    let mut builder = ProblemSpec::builder(if target_mean.is_some() { "lq_steer_mean" } else { "lq_steer" })
        .drift(move |_, x, u| a * x + b * u)
        .drift_dx(move |_, _, _| a)
        .drift_du(move |_, _, _| b)
        .running_cost(move |_, x, u| 0.5 * (q * x * x + r * u * u))
        .running_cost_dx(move |_, x, _| q * x)
        .running_cost_du(move |_, _, u| r * u)
        .terminal_cost(move |_, x| 0.5 * qf * x * x)
        .terminal_cost_dx(move |_, x| qf * x)
        .sigma(sigma)
        .control_form(ControlForm::AffineQuadratic {
            gain: map2(move |_, _| b),
            weight: map2(move |_, _| r),
        });
    if let Some(m) = target_mean {
        builder = builder
            .constraint(move |_, x| x - m)
            .constraint_dx(|_, _| 1.0)
            .constraint_dt(|_, _| 0.0);
    }
    Ok(Preset {
        id: if target_mean.is_some() { "lq_steer_mean" } else { "lq_steer" },
        spec: builder.build()?,
        rho0: InitialDensity::gaussian(2.0, 0.25)?,
        grid: Grid1D::with_spacing(-4.0, 6.0, 0.01)?,
        time: TimeGrid::with_step(0.0, horizon, 1e-3)?,
        boundary: StoppingBoundary::None,
    })
}

/// Controlled OU `f = −x + u`, `L = ½(x² + u²)`, `Φ = x²`, killed below −0.5.
pub fn ou_cost() -> Result<Preset> {
    Ok(Preset {
        id: "ou_cost",
        spec: ProblemSpec::builder("ou_cost")
            .drift(|_, x, u| -x + u)
            .drift_dx(|_, _, _| -1.0)
            .drift_du(|_, _, _| 1.0)
            .running_cost(|_, x, u| 0.5 * (x * x + u * u))
            .running_cost_dx(|_, x, _| x)
            .running_cost_du(|_, _, u| u)
            .terminal_cost(|_, x| x * x)
            .terminal_cost_dx(|_, x| 2.0 * x)
            .sigma(0.5)
            .control_form(ControlForm::AffineQuadratic {
                gain: map2(|_, _| 1.0),
                weight: map2(|_, _| 1.0),
            })
            .build()?,
        rho0: InitialDensity::gaussian(0.5, 0.1)?,
        grid: Grid1D::with_spacing(-3.0, 4.0, 0.01)?,
        time: TimeGrid::with_step(0.0, 1.0, 1e-3)?,
        boundary: StoppingBoundary::Below(map1(|_| -0.5)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_id_resolves() {
        for id in PRESET_IDS {
            let p = preset(id).unwrap();
            assert_eq!(p.id, *id);
            let (_, mass) = p.rho0.project(&p.grid);
            assert!(mass > 0.999, "{id}: {mass}");
        }
        assert!(matches!(preset("nope"), Err(SolverError::UnknownPreset(_))));
    }

    #[test]
    fn analytic_partials_match_differences() {
        let probes: Vec<(f64, f64, f64)> = (0..50)
            .map(|i| {
                let s = i as f64 / 50.0;
                (0.9 * s, -2.0 + 4.0 * s, 1.0 - 2.0 * s)
            })
            .collect();
        for id in ["ou", "brownian_bridge", "lq_steer", "lq_steer_mean", "ou_cost"] {
            let p = preset(id).unwrap();
            assert!(p.spec.partial_mismatch(&probes).unwrap() < 1e-5, "{id}");
        }
    }
}
