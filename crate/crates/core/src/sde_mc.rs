//! Euler–Maruyama simulation of the killed diffusion, used as ground truth
//! for densities, surviving mass and costs; plus 1-D Wasserstein-1
//! distances between samples and grid densities.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Result, SolverError};
use crate::grid::{cumulative_trapezoid, fmt_num, pairwise_sum, Field};
use crate::model::{Feedback, InitialDensity, ProblemSpec, StoppingBoundary, TimeAssignment};
use crate::transform::NOT_STOPPED;

/// Monte Carlo settings. Paths run on `[t0, horizon]`.
#[derive(Debug, Clone)]
pub struct McConfig {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub horizon: f64,
    pub t0: f64,
    /// Optional per-path stopping time `τ(x₀)`.
    pub assignment: Option<TimeAssignment>,
}

impl McConfig {
    pub fn new(n_paths: usize, dt: f64, seed: u64, horizon: f64) -> Result<Self> {
        let cfg = Self {
            n_paths,
            dt,
            seed,
            horizon,
            t0: 0.0,
            assignment: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_assignment(mut self, a: TimeAssignment) -> Self {
        self.assignment = Some(a);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_paths == 0 {
            return Err(SolverError::invalid("n_paths", "must be at least 1"));
        }
        if !(self.dt > 0.0) {
            return Err(SolverError::invalid("dt", "must be positive"));
        }
        if !(self.horizon > self.t0) {
            return Err(SolverError::invalid("horizon", "must exceed t0"));
        }
        Ok(())
    }
}

/// Per-path outcome of [`simulate_killed`].
#[derive(Debug, Clone, PartialEq)]
pub struct McResult {
    pub origins: Vec<f64>,
    /// Position at the stop time, or at the horizon for surviving paths.
    pub positions: Vec<f64>,
    /// Stop time, or [`NOT_STOPPED`].
    pub stop_time: Vec<f64>,
    pub alive: Vec<bool>,
    pub cost: Vec<f64>,
    pub horizon: f64,
}

impl McResult {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn survival_fraction(&self) -> f64 {
        self.alive.iter().filter(|a| **a).count() as f64 / self.len().max(1) as f64
    }

    pub fn alive_positions(&self) -> Vec<f64> {
        self.positions
            .iter()
            .zip(&self.alive)
            .filter(|(_, a)| **a)
            .map(|(x, _)| *x)
            .collect()
    }

    /// CSV with header `path_id,stop_time,x_final,alive,cost`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "path_id,stop_time,x_final,alive,cost")?;
        for i in 0..self.len() {
            let st = if self.stop_time[i].is_finite() {
                fmt_num(self.stop_time[i])
            } else {
                "inf".to_string()
            };
            writeln!(
                out,
                "{},{},{},{},{}",
                i,
                st,
                fmt_num(self.positions[i]),
                self.alive[i] as u8,
                fmt_num(self.cost[i])
            )?;
        }
        Ok(())
    }

    /// `key=value` lines: `mean_cost`, `se`, `survival`.
    pub fn summary(&self) -> String {
        let (m, se) = estimate_cost(self).unwrap_or((f64::NAN, f64::NAN));
        format!(
            "mean_cost={}\nse={}\nsurvival={}\n",
            fmt_num(m),
            fmt_num(se),
            fmt_num(self.survival_fraction())
        )
    }
}

struct PathOutcome {
    x0: f64,
    x: f64,
    stop: f64,
    cost: f64,
}

/// Simulates `n_paths` Euler–Maruyama paths of the controlled diffusion,
/// killed on first entry into the stopped region (or at `τ(x₀)`). Each path
/// owns the ChaCha stream `(seed, path index)`, so results do not depend on
/// the number of workers.
pub fn simulate_killed(
    spec: &ProblemSpec,
    feedback: &Feedback,
    rho0: &InitialDensity,
    boundary: &StoppingBoundary,
    cfg: &McConfig,
) -> Result<McResult> {
    cfg.validate()?;
    let steps = ((cfg.horizon - cfg.t0) / cfg.dt - 1e-9).ceil().max(1.0) as usize;
    let h = (cfg.horizon - cfg.t0) / steps as f64;
    let r = spec.discount();
    let t0 = cfg.t0;

    let outcomes: Vec<PathOutcome> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let x0 = rho0.quantile(rng.gen::<f64>());
            let tau = cfg.assignment.as_ref().map(|a| a.tau(x0));
            let disc = |t: f64| if r == 0.0 { 1.0 } else { (-r * (t - t0)).exp() };
            let mut x = x0;
            let mut cost = 0.0;
            if boundary.level(t0, x0) >= 0.0 || tau.is_some_and(|tau| tau <= t0) {
                cost = spec.terminal_cost(t0, x0);
                return PathOutcome { x0, x, stop: t0, cost };
            }
            for k in 0..steps {
                let t = t0 + k as f64 * h;
                let (step, at_tau) = match tau {
                    Some(tau) if tau < t + h => (tau - t, true),
                    _ => (h, false),
                };
                let u = feedback.eval(t, x);
                let xi: f64 = rng.sample(StandardNormal);
                let x1 = x + spec.drift(t, x, u) * step + spec.sigma(t) * step.sqrt() * xi;
                let l0 = boundary.level(t, x);
                let l1 = boundary.level(t + step, x1);
                if l1 >= 0.0 {
                    let theta = (l0 / (l0 - l1)).clamp(0.0, 1.0);
                    let ts = t + theta * step;
                    let xs = x + theta * (x1 - x);
                    cost += disc(t) * spec.running_cost(t, x, u) * theta * step;
                    cost += disc(ts) * spec.terminal_cost(ts, xs);
                    return PathOutcome { x0, x: xs, stop: ts, cost };
                }
                cost += disc(t) * spec.running_cost(t, x, u) * step;
                x = x1;
                if at_tau {
                    let ts = t + step;
                    cost += disc(ts) * spec.terminal_cost(ts, x);
                    return PathOutcome { x0, x, stop: ts, cost };
                }
            }
            cost += disc(cfg.horizon) * spec.terminal_cost(cfg.horizon, x);
            PathOutcome {
                x0,
                x,
                stop: NOT_STOPPED,
                cost,
            }
        })
        .collect();

    let mut res = McResult {
        origins: Vec::with_capacity(cfg.n_paths),
        positions: Vec::with_capacity(cfg.n_paths),
        stop_time: Vec::with_capacity(cfg.n_paths),
        alive: Vec::with_capacity(cfg.n_paths),
        cost: Vec::with_capacity(cfg.n_paths),
        horizon: cfg.horizon,
    };
    for o in outcomes {
        res.origins.push(o.x0);
        res.positions.push(o.x);
        res.alive.push(!o.stop.is_finite());
        res.stop_time.push(o.stop);
        res.cost.push(o.cost);
    }
    Ok(res)
}

/// Sample mean and standard error of the realised costs.
pub fn estimate_cost(result: &McResult) -> Result<(f64, f64)> {
    let n = result.cost.len();
    if n < 2 {
        return Err(SolverError::invalid("n_paths", "need at least two paths"));
    }
    let mean = pairwise_sum(&result.cost) / n as f64;
    let dev: Vec<f64> = result.cost.iter().map(|c| (c - mean).powi(2)).collect();
    let var = pairwise_sum(&dev) / (n - 1) as f64;
    Ok((mean, (var / n as f64).sqrt()))
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// W1 between two empirical measures: `∫ |F_a − F_b| dx`.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(SolverError::EmptyInput("wasserstein1"));
    }
    let (a, b) = (sorted(a), sorted(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = a[0].min(b[0]);
    let mut acc = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&p), Some(&q)) => p.min(q),
            (Some(&p), None) => p,
            (None, Some(&q)) => q,
            (None, None) => break,
        };
        acc += (i as f64 / na - j as f64 / nb).abs() * (next - prev);
        while i < a.len() && a[i] <= next {
            i += 1;
        }
        while j < b.len() && b[j] <= next {
            j += 1;
        }
        prev = next;
    }
    Ok(acc)
}

/// Normalised CDF of a piecewise-linear density.
struct FieldCdf<'a> {
    field: &'a Field,
    cum: Vec<f64>,
    mass: f64,
}

impl<'a> FieldCdf<'a> {
    fn new(field: &'a Field) -> Result<Self> {
        if field.values().iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(SolverError::invalid("field", "density must be finite and non-negative"));
        }
        let cum = cumulative_trapezoid(field);
        let mass = *cum.last().unwrap();
        if !(mass > 0.0) {
            return Err(SolverError::EmptyInput("wasserstein1 (field has no mass)"));
        }
        Ok(Self { field, cum, mass })
    }

    /// Cell index and local coordinate for `x` inside the grid.
    fn cell(&self, x: f64) -> (usize, f64) {
        let g = self.field.grid();
        let n = g.len();
        let s = ((x - g.x_min()) / g.dx()).clamp(0.0, (n - 1) as f64);
        let j = (s.floor() as usize).min(n - 2);
        (j, x - g.x(j))
    }

    fn eval(&self, x: f64) -> f64 {
        let g = self.field.grid();
        if x <= g.x_min() {
            return 0.0;
        }
        if x >= g.x_max() {
            return 1.0;
        }
        let (j, s) = self.cell(x);
        let v = self.field.values();
        let slope = (v[j + 1] - v[j]) / g.dx();
        (self.cum[j] + v[j] * s + 0.5 * slope * s * s) / self.mass
    }

    /// `∫_p^q F(x) dx` for `[p,q]` inside one cell (or outside the grid).
    fn integral(&self, p: f64, q: f64) -> f64 {
        let g = self.field.grid();
        if q <= g.x_min() {
            return 0.0;
        }
        if p >= g.x_max() {
            return q - p;
        }
        let (j, sp) = self.cell(0.5 * (p + q));
        let sp = sp - 0.5 * (q - p);
        let sq = sp + (q - p);
        let v = self.field.values();
        let slope = (v[j + 1] - v[j]) / g.dx();
        let prim = |s: f64| self.cum[j] * s + 0.5 * v[j] * s * s + slope * s * s * s / 6.0;
        (prim(sq) - prim(sp)) / self.mass
    }

    /// `∫_p^q |F(x) − c| dx` inside one cell, splitting at the crossing.
    fn abs_diff_integral(&self, p: f64, q: f64, c: f64) -> f64 {
        if q <= p {
            return 0.0;
        }
        let (fp, fq) = (self.eval(p), self.eval(q));
        if fp >= c {
            return self.integral(p, q) - c * (q - p);
        }
        if fq <= c {
            return c * (q - p) - self.integral(p, q);
        }
        // F is monotone: bisect the crossing
        let (mut lo, mut hi) = (p, q);
        for _ in 0..60 {
            let m = 0.5 * (lo + hi);
            if self.eval(m) < c {
                lo = m;
            } else {
                hi = m;
            }
        }
        let r = 0.5 * (lo + hi);
        (c * (r - p) - self.integral(p, r)) + (self.integral(r, q) - c * (q - r))
    }
}

/// W1 between an empirical measure and a grid density normalised to mass 1.
/// The field's CDF is the exact integral of its piecewise-linear
/// interpolant.
pub fn wasserstein1_sample_field(sample: &[f64], field: &Field) -> Result<f64> {
    if sample.is_empty() {
        return Err(SolverError::EmptyInput("wasserstein1"));
    }
    let cdf = FieldCdf::new(field)?;
    let s = sorted(sample);
    let n = s.len() as f64;
    let g = field.grid();
    let nodes = g.nodes();
    let mut breaks: Vec<f64> = Vec::with_capacity(s.len() + nodes.len());
    breaks.extend_from_slice(&s);
    breaks.extend_from_slice(&nodes);
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();

    let mut acc = 0.0;
    let mut i = 0usize;
    for w in breaks.windows(2) {
        let (p, q) = (w[0], w[1]);
        while i < s.len() && s[i] <= p {
            i += 1;
        }
        acc += cdf.abs_diff_integral(p, q, i as f64 / n);
    }
    Ok(acc)
}

/// W1 between two grid densities, each normalised to mass 1.
pub fn wasserstein1_fields(a: &Field, b: &Field) -> Result<f64> {
    let (ca, cb) = (FieldCdf::new(a)?, FieldCdf::new(b)?);
    let mut breaks = a.grid().nodes();
    breaks.extend(b.grid().nodes());
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    // Simpson on each piece; both CDFs are quadratic between breaks
    let mut acc = 0.0;
    for w in breaks.windows(2) {
        let (p, q) = (w[0], w[1]);
        let d = |x: f64| (ca.eval(x) - cb.eval(x)).abs();
        let m = 0.5 * (p + q);
        acc += (q - p) / 6.0 * (d(p) + 4.0 * d(m) + d(q));
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid1D;
    use proptest::prelude::*;

    fn gauss(x: f64, m: f64, v: f64) -> f64 {
        (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
    }

    #[test]
    fn frozen_paths_collect_running_cost_only() {
        // σ must be positive; a vanishing σ leaves every path frozen
        let spec = ProblemSpec::builder("frozen")
            .sigma(1e-300)
            .running_cost(|_, _, _| 2.0)
            .build()
            .unwrap();
        let rho0 = InitialDensity::gaussian(0.5, 1.0).unwrap();
        let cfg = McConfig::new(200, 0.01, 3, 1.0).unwrap();
        let res = simulate_killed(&spec, &Feedback::Zero, &rho0, &StoppingBoundary::None, &cfg).unwrap();
        for i in 0..res.len() {
            assert_eq!(res.positions[i], res.origins[i]);
            assert!((res.cost[i] - 2.0).abs() < 1e-12);
        }
        let (m, se) = estimate_cost(&res).unwrap();
        assert!((m - 2.0).abs() < 1e-12 && se < 1e-12);
    }

    #[test]
    fn half_line_survival_matches_reflection_principle() {
        let spec = ProblemSpec::builder("bm").sigma(1.0).build().unwrap();
        let rho0 = InitialDensity::gaussian(1.0, 1e-12).unwrap();
        let cfg = McConfig::new(100_000, 2.5e-4, 11, 1.0).unwrap();
        let b = StoppingBoundary::below_const(0.0);
        let res = simulate_killed(&spec, &Feedback::Zero, &rho0, &b, &cfg).unwrap();
        let exact = statrs::function::erf::erf(1.0 / 2f64.sqrt());
        assert!((res.survival_fraction() - exact).abs() < 0.01, "{}", res.survival_fraction());
        for i in 0..res.len() {
            if !res.alive[i] {
                assert!(res.stop_time[i] <= 1.0);
                assert!(res.positions[i].abs() < 0.2);
            }
        }
    }

    #[test]
    fn ou_mean_and_determinism() {
        let spec = ProblemSpec::builder("ou").drift(|_, x, _| -x).sigma(2f64.sqrt()).build().unwrap();
        let rho0 = InitialDensity::gaussian(2.0, 0.25).unwrap();
        let cfg = McConfig::new(100_000, 1e-2, 5, 1.0).unwrap();
        let res = simulate_killed(&spec, &Feedback::Zero, &rho0, &StoppingBoundary::None, &cfg).unwrap();
        let mean = pairwise_sum(&res.positions) / res.len() as f64;
        assert!((mean - 2.0 * (-1.0f64).exp()).abs() < 0.02);
        let small = McConfig::new(500, 1e-2, 5, 1.0).unwrap();
        let a = simulate_killed(&spec, &Feedback::Zero, &rho0, &StoppingBoundary::None, &small).unwrap();
        let b = simulate_killed(&spec, &Feedback::Zero, &rho0, &StoppingBoundary::None, &small).unwrap();
        assert_eq!(a, b);
        // stream per path: a prefix of a larger run is identical
        let sub = McConfig::new(200, 1e-2, 5, 1.0).unwrap();
        let c = simulate_killed(&spec, &Feedback::Zero, &rho0, &StoppingBoundary::None, &sub).unwrap();
        assert_eq!(&a.positions[..200], &c.positions[..]);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let d = pool.install(|| simulate_killed(&spec, &Feedback::Zero, &rho0, &StoppingBoundary::None, &small).unwrap());
        assert_eq!(a, d);
    }

    #[test]
    fn unit_running_cost_integrates_horizon() {
        let spec = ProblemSpec::builder("unit").sigma(1.0).running_cost(|_, _, _| 1.0).build().unwrap();
        let rho0 = InitialDensity::gaussian(0.0, 1.0).unwrap();
        let cfg = McConfig::new(1000, 0.03, 1, 1.3).unwrap();
        let res = simulate_killed(&spec, &Feedback::Zero, &rho0, &StoppingBoundary::None, &cfg).unwrap();
        let (m, se) = estimate_cost(&res).unwrap();
        assert!((m - 1.3).abs() <= 3.0 * se + 1e-12);
    }

    #[test]
    fn assignment_stops_at_tau_with_terminal_cost() {
        let spec = ProblemSpec::builder("bm")
            .sigma(1.0)
            .running_cost(|_, _, _| 1.0)
            .terminal_cost(|t, _| 10.0 * t)
            .build()
            .unwrap();
        let rho0 = InitialDensity::gaussian(0.0, 1.0).unwrap();
        let cfg = McConfig::new(100, 0.1, 1, 1.0).unwrap().with_assignment(TimeAssignment::Common(0.45));
        let res = simulate_killed(&spec, &Feedback::Zero, &rho0, &StoppingBoundary::None, &cfg).unwrap();
        for i in 0..res.len() {
            assert!(!res.alive[i]);
            assert!((res.stop_time[i] - 0.45).abs() < 1e-12);
            assert!((res.cost[i] - 0.45 - 4.5).abs() < 1e-9);
        }
    }

    #[test]
    fn config_and_input_errors() {
        assert!(McConfig::new(0, 0.1, 1, 1.0).is_err());
        assert!(McConfig::new(10, 0.0, 1, 1.0).is_err());
        assert_eq!(wasserstein1(&[], &[1.0]), Err(SolverError::EmptyInput("wasserstein1")));
        let single = McResult {
            origins: vec![0.0],
            positions: vec![0.0],
            stop_time: vec![NOT_STOPPED],
            alive: vec![true],
            cost: vec![1.0],
            horizon: 1.0,
        };
        assert!(estimate_cost(&single).is_err());
    }

    #[test]
    fn w1_examples() {
        let a = vec![0.3, -1.0, 2.0];
        assert_eq!(wasserstein1(&a, &a).unwrap(), 0.0);
        assert!((wasserstein1(&[0.0], &[1.7]).unwrap() - 1.7).abs() < 1e-15);
        let n = 200_000;
        let z = InitialDensity::gaussian(0.0, 1.0).unwrap();
        let s0 = ParticleQuantiles::new(&z, n);
        let s1: Vec<f64> = s0.0.iter().map(|x| x + 0.5).collect();
        assert!((wasserstein1(&s0.0, &s1).unwrap() - 0.5).abs() < 0.02);
        let g = Grid1D::new(-8.0, 8.0, 1601).unwrap();
        let f0 = Field::from_fn(g, |x| gauss(x, 0.0, 1.0));
        let f1 = Field::from_fn(g, |x| gauss(x, 0.5, 1.0));
        assert!((wasserstein1_fields(&f0, &f1).unwrap() - 0.5).abs() < 1e-4);
        assert!((wasserstein1_sample_field(&s0.0, &f1).unwrap() - 0.5).abs() < 0.02);
        assert!(wasserstein1_sample_field(&s0.0, &f0).unwrap() < 1e-3);
    }

    #[test]
    fn w1_sample_field_point_mass_oracle() {
        // uniform density on [0,1] vs point mass at c: ∫|F−1{x≥c}| = c²/2 + (1−c)²/2
        let g = Grid1D::new(0.0, 1.0, 11).unwrap();
        let f = Field::from_fn(g, |_| 1.0);
        for c in [0.0, 0.25, 0.5, 0.93] {
            let exact = 0.5 * c * c + 0.5 * (1.0 - c) * (1.0 - c);
            assert!((wasserstein1_sample_field(&[c], &f).unwrap() - exact).abs() < 1e-12);
        }
        // point outside the grid
        let exact = 0.5 + 1.0;
        assert!((wasserstein1_sample_field(&[2.0], &f).unwrap() - exact).abs() < 1e-12);
    }

    struct ParticleQuantiles(Vec<f64>);

    impl ParticleQuantiles {
        fn new(d: &InitialDensity, n: usize) -> Self {
            Self((0..n).map(|i| d.quantile((i as f64 + 0.5) / n as f64)).collect())
        }
    }

    proptest! {
        #[test]
        fn w1_is_a_symmetric_translation_metric(
            a in prop::collection::vec(-5.0f64..5.0, 1..40),
            b in prop::collection::vec(-5.0f64..5.0, 1..40),
            shift in -3.0f64..3.0,
        ) {
            let ab = wasserstein1(&a, &b).unwrap();
            let ba = wasserstein1(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ab >= 0.0);
            let moved: Vec<f64> = a.iter().map(|x| x + shift).collect();
            prop_assert!((wasserstein1(&a, &moved).unwrap() - shift.abs()).abs() < 1e-9);
            // mean difference is a lower bound
            let ma = a.iter().sum::<f64>() / a.len() as f64;
            let mb = b.iter().sum::<f64>() / b.len() as f64;
            prop_assert!(ab + 1e-9 >= (ma - mb).abs());
        }
    }
}
