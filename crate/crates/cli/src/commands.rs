//! Subcommand pipelines. Each writes its CSVs and `manifest.txt` into the
//! output directory; outputs are written one after another from the
//! calling thread.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use thiserror::Error;

use density_steer::bench::{run_benchmark, BenchOptions, BENCHMARKS};
use density_steer::diagnostics::{
    all_pass, decomposition_report, duality_report, format_table, ito_report, marginal_equivalence_report,
    mass_balance_report, stein_report, write_reports_csv, CheckReport, MarginalConfig,
};
use density_steer::fokker_planck::solve_fp;
use density_steer::grid::fmt_num;
use density_steer::model::{map1, ControlForm, Feedback};
use density_steer::optimality::{fb_sweep, BoundarySide, SweepConfig, SweepProblem, TimeMode};
use density_steer::presets::Preset;
use density_steer::sde_mc::{simulate_killed, McConfig};
use density_steer::transform::{
    advect_particles, pushforward_density, score_path, velocity_field, ParticleEnsemble, ScoreConfig, StopRule,
};
use density_steer::value_hjb::{solve_hjb_dirichlet, solve_obstacle_vi, EndCondition, VIMode, ValueConfig};
use density_steer::SolverError;

use crate::config::{ConfigError, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Usage(String),
}

/// Result of a successful run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    CheckFailed,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Success => 0,
            Outcome::CheckFailed => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    Fp,
    Transform,
    Mc,
    Hjb,
    Vi,
    Sweep,
    Bench,
    Check,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Fp => "fp",
            Subcommand::Transform => "transform",
            Subcommand::Mc => "mc",
            Subcommand::Hjb => "hjb",
            Subcommand::Vi => "vi",
            Subcommand::Sweep => "sweep",
            Subcommand::Bench => "bench",
            Subcommand::Check => "check",
        }
    }
}

pub const CHECKS: &[&str] = &["stein", "mass_balance", "marginals", "ito", "decomposition", "duality"];

/// Everything a run needs besides the subcommand.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub config: Option<RunConfig>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub tol_scale: f64,
    /// Benchmark or check name.
    pub target: Option<String>,
}

impl RunOptions {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self {
            config: None,
            out: out.into(),
            seed: None,
            jobs: None,
            tol_scale: 1.0,
            target: None,
        }
    }
}

/// Worker count from the flag, else `DENSITY_STEER_JOBS`, else the
/// number of CPUs.
pub fn resolve_jobs(flag: Option<usize>) -> Result<usize, CliError> {
    if let Some(j) = flag {
        return if j == 0 {
            Err(CliError::Usage("--jobs must be at least 1".into()))
        } else {
            Ok(j)
        };
    }
    match std::env::var("DENSITY_STEER_JOBS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(j) if j > 0 => Ok(j),
            _ => Err(CliError::Usage(format!("DENSITY_STEER_JOBS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Runs `cmd` on a dedicated pool of the resolved worker count.
pub fn run(cmd: Subcommand, opts: &RunOptions) -> Result<Outcome, CliError> {
    let jobs = resolve_jobs(opts.jobs)?;
    if !(opts.tol_scale > 0.0 && opts.tol_scale.is_finite()) {
        return Err(CliError::Usage("--tol-scale must be positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    std::fs::create_dir_all(&opts.out)?;
    let start = Instant::now();
    let mut run = Run {
        opts,
        files: Vec::new(),
    };
    let outcome = pool.install(|| run.dispatch(cmd))?;
    run.write_manifest(cmd, jobs, start)?;
    Ok(outcome)
}

struct Run<'a> {
    opts: &'a RunOptions,
    files: Vec<String>,
}

impl Run<'_> {
    fn config(&self, default_preset: &str) -> Result<RunConfig, CliError> {
        let mut c = match &self.opts.config {
            Some(c) => c.clone(),
            None => RunConfig::for_preset(default_preset)?,
        };
        if let Some(s) = self.opts.seed {
            c.seed = s;
        }
        Ok(c)
    }

    fn required_config(&self, cmd: Subcommand) -> Result<RunConfig, CliError> {
        if self.opts.config.is_none() {
            return Err(CliError::Usage(format!("`{}` needs --config", cmd.name())));
        }
        self.config("ou")
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>, CliError> {
        self.files.push(name.to_string());
        Ok(BufWriter::new(File::create(self.opts.out.join(name))?))
    }

    fn write(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
    ) -> Result<(), CliError> {
        let mut w = self.create(name)?;
        f(&mut w)?;
        w.flush()?;
        Ok(())
    }

    fn dispatch(&mut self, cmd: Subcommand) -> Result<Outcome, CliError> {
        match cmd {
            Subcommand::Fp => self.fp(),
            Subcommand::Transform => self.transform(),
            Subcommand::Mc => self.mc(),
            Subcommand::Hjb => self.hjb(),
            Subcommand::Vi => self.vi(),
            Subcommand::Sweep => self.sweep(),
            Subcommand::Bench => self.bench(),
            Subcommand::Check => self.check(),
        }
    }

    fn fp(&mut self) -> Result<Outcome, CliError> {
        let cfg = self.required_config(Subcommand::Fp)?;
        let p = cfg.resolve()?;
        let fb = feedback_for(&p)?;
        let path = solve_fp(&p.spec, &fb, &p.rho0, &p.grid, &p.time, &p.boundary)?;
        self.write("density.csv", |w| path.write_density_csv(w))?;
        self.write("flux.csv", |w| path.write_flux_csv(w))?;
        Ok(Outcome::Success)
    }

    fn transform(&mut self) -> Result<Outcome, CliError> {
        let cfg = self.required_config(Subcommand::Transform)?;
        let p = cfg.resolve()?;
        let fb = feedback_for(&p)?;
        let path = solve_fp(&p.spec, &fb, &p.rho0, &p.grid, &p.time, &p.boundary)?;
        let scores = score_path(&path, &p.boundary, &score_config(&cfg))?;
        let vel = velocity_field(&p.spec, &fb, &path, &scores);
        let mut ens = ParticleEnsemble::from_quantiles(&p.rho0, cfg.transform.particles, p.time.t0());
        ens.stop_outside(&p.boundary);
        let rule = StopRule {
            boundary: &p.boundary,
            assignment: None,
        };
        advect_particles(&mut ens, &vel, rule, p.time.dt(), p.time.t1())?;
        let pushed = pushforward_density(&ens, &p.grid, None)?;
        self.write("velocity.csv", |w| vel.write_csv(w))?;
        self.write("ensemble.csv", |w| ens.write_csv(w))?;
        self.write("pushforward.csv", |w| pushed.write_csv(w))?;
        Ok(Outcome::Success)
    }

    fn mc(&mut self) -> Result<Outcome, CliError> {
        let cfg = self.required_config(Subcommand::Mc)?;
        let p = cfg.resolve()?;
        let fb = feedback_for(&p)?;
        let mut mc_cfg = McConfig::new(cfg.mc.paths, cfg.mc.dt, cfg.seed, p.time.t1())?;
        mc_cfg.t0 = p.time.t0();
        let res = simulate_killed(&p.spec, &fb, &p.rho0, &p.boundary, &mc_cfg)?;
        self.write("paths.csv", |w| res.write_csv(w))?;
        let summary = res.summary();
        self.write("summary.txt", |w| w.write_all(summary.as_bytes()))?;
        Ok(Outcome::Success)
    }

    fn hjb(&mut self) -> Result<Outcome, CliError> {
        let cfg = self.required_config(Subcommand::Hjb)?;
        let p = cfg.resolve()?;
        let v = solve_hjb_dirichlet(&p.spec, &p.boundary, &p.grid, &p.time, &ValueConfig::default())?;
        self.write("value.csv", |w| v.write_csv(w))?;
        Ok(Outcome::Success)
    }

    fn vi(&mut self) -> Result<Outcome, CliError> {
        let cfg = self.required_config(Subcommand::Vi)?;
        let p = cfg.resolve()?;
        let vcfg = if p.id == "american_put_log" {
            ValueConfig {
                left: EndCondition::Obstacle,
                right: EndCondition::Fixed(0.0),
                ..ValueConfig::default()
            }
        } else {
            ValueConfig::default()
        };
        let mode = if cfg.vi_stationary {
            VIMode::Stationary { dt0: p.time.dt() }
        } else {
            VIMode::Horizon(p.time)
        };
        let v = solve_obstacle_vi(&p.spec, &p.boundary, &p.grid, mode, &vcfg)?;
        self.write("value.csv", |w| v.write_csv(w))?;
        self.write("free_boundary.csv", |w| v.write_free_boundary_csv(w))?;
        Ok(Outcome::Success)
    }

    fn sweep(&mut self) -> Result<Outcome, CliError> {
        let cfg = self.required_config(Subcommand::Sweep)?;
        let p = cfg.resolve()?;
        let scfg = SweepConfig {
            max_iters: cfg.sweep.max_iters,
            tol: cfg.sweep.tol,
            damping: cfg.sweep.damping,
            score: score_config(&cfg),
            ..SweepConfig::default()
        };
        let mode = if p.id == "brownian_bridge" {
            TimeMode::BoundaryScale {
                shape: map1(|t: f64| (1.0 - t).max(0.0).sqrt()),
                side: BoundarySide::Above,
                initial: cfg.sweep.initial_scale,
                window: (0.0, 0.9),
            }
        } else {
            TimeMode::FixedHorizon
        };
        let prob = SweepProblem {
            spec: &p.spec,
            rho0: &p.rho0,
            grid: p.grid,
            time: p.time,
            boundary: p.boundary.clone(),
        };
        let st = fb_sweep(&prob, &mode, &scfg)?;
        self.write("history.csv", |w| st.write_history_csv(w))?;
        self.write("costate.csv", |w| st.costate.write_csv(w))?;
        self.write("controls.csv", |w| st.controls.write_csv(w))?;
        let summary = format!(
            "converged={}\niterations={}\neta={}\nboundary_scale={}\nos1={}\nos2={}\nos4={}\nos5={}\n",
            st.converged,
            st.iterations(),
            fmt_num(st.multiplier.eta),
            st.boundary_scale.map_or("none".to_string(), fmt_num),
            fmt_num(st.os1),
            fmt_num(st.os2),
            fmt_num(st.os4),
            fmt_num(st.os5),
        );
        self.write("summary.txt", |w| w.write_all(summary.as_bytes()))?;
        st.ensure_converged()?;
        Ok(Outcome::Success)
    }

    fn bench(&mut self) -> Result<Outcome, CliError> {
        let target = self
            .opts
            .target
            .clone()
            .ok_or_else(|| CliError::Usage(format!("bench needs a name: {} or all", BENCHMARKS.join(", "))))?;
        let names: Vec<&str> = if target == "all" {
            BENCHMARKS.to_vec()
        } else if BENCHMARKS.contains(&target.as_str()) {
            vec![target.as_str()]
        } else {
            return Err(CliError::Usage(format!(
                "unknown benchmark `{target}` (known: {}, all)",
                BENCHMARKS.join(", ")
            )));
        };
        let opts = BenchOptions {
            tol_scale: self.opts.tol_scale,
        };
        let results: Vec<(&str, Result<Vec<CheckReport>, SolverError>)> = {
            use rayon::prelude::*;
            names.par_iter().map(|n| (*n, run_benchmark(n, &opts))).collect()
        };
        let mut pass = true;
        let mut w = self.create("bench.csv")?;
        writeln!(w, "benchmark,check,value,tolerance,pass")?;
        for (name, res) in results {
            let reports = res?;
            pass &= all_pass(&reports);
            print!("== {name}\n{}", format_table(&reports));
            write_report_rows(&mut w, name, &reports)?;
        }
        w.flush()?;
        Ok(if pass { Outcome::Success } else { Outcome::CheckFailed })
    }

    fn check(&mut self) -> Result<Outcome, CliError> {
        let target = self
            .opts
            .target
            .clone()
            .ok_or_else(|| CliError::Usage(format!("check needs a name: {}", CHECKS.join(", "))))?;
        let reports = match target.as_str() {
            "stein" => stein_report()?,
            "mass_balance" => {
                let cfg = self.config("half_line")?;
                mass_balance_report(&cfg.resolve()?, 1.0)?
            }
            "marginals" => {
                let cfg = self.config("ou")?;
                let p = cfg.resolve()?;
                let mcfg = MarginalConfig {
                    particles: cfg.mc.paths,
                    seed: cfg.seed,
                    score: score_config(&cfg),
                    checkpoints: marginal_checkpoints(p.time.t0(), p.time.t1()),
                    ..MarginalConfig::default()
                };
                marginal_equivalence_report(&p.spec, &p.rho0, &p.grid, p.time.dt(), &p.boundary, &mcfg)?
            }
            "ito" => ito_report(cfg_particles(&self.opts.config))?,
            "decomposition" => {
                let cfg = self.config("ou_cost")?;
                vec![decomposition_report(&cfg.resolve()?, cfg.mc.paths, cfg.seed, cfg.mc.dt, 0.02)?]
            }
            "duality" => {
                let cfg = self.config("ou_cost")?;
                let scfg = SweepConfig {
                    max_iters: cfg.sweep.max_iters,
                    tol: cfg.sweep.tol,
                    damping: cfg.sweep.damping,
                    ..SweepConfig::default()
                };
                duality_report(&cfg.resolve()?, &scfg, DUALITY_MARGIN)?
            }
            other => {
                return Err(CliError::Usage(format!(
                    "unknown check `{other}` (known: {})",
                    CHECKS.join(", ")
                )))
            }
        };
        let reports: Vec<CheckReport> = reports.into_iter().map(|r| r.scaled(self.opts.tol_scale)).collect();
        print!("{}", format_table(&reports));
        self.write("check.csv", |w| write_reports_csv(w, &target, &reports))?;
        Ok(if all_pass(&reports) {
            Outcome::Success
        } else {
            Outcome::CheckFailed
        })
    }

    fn write_manifest(&mut self, cmd: Subcommand, jobs: usize, start: Instant) -> Result<(), CliError> {
        let mut w = BufWriter::new(File::create(self.opts.out.join("manifest.txt"))?);
        writeln!(w, "density-steer-cli {}", env!("CARGO_PKG_VERSION"))?;
        writeln!(w, "density-steer-core {}", density_steer::VERSION)?;
        writeln!(w, "subcommand {}", cmd.name())?;
        if let Some(t) = &self.opts.target {
            writeln!(w, "target {t}")?;
        }
        let seed = self
            .opts
            .seed
            .or(self.opts.config.as_ref().map(|c| c.seed))
            .unwrap_or(crate::config::DEFAULT_SEED);
        writeln!(w, "seed {seed}")?;
        writeln!(w, "jobs {jobs}")?;
        writeln!(w, "tol_scale {}", self.opts.tol_scale)?;
        writeln!(w, "files {}", self.files.join(" "))?;
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        writeln!(w, "finished_unix {now}")?;
        writeln!(w, "wall_time_s {:.3}", start.elapsed().as_secs_f64())?;
        writeln!(w, "[config]")?;
        match &self.opts.config {
            Some(c) => write!(w, "{}", c.source)?,
            None => writeln!(w, "# none")?,
        }
        w.flush()?;
        Ok(())
    }
}

/// Nodes kept away from the grid ends in the duality check, where the
/// value solve uses a one-sided closure.
pub const DUALITY_MARGIN: f64 = 0.1;

fn cfg_particles(c: &Option<RunConfig>) -> usize {
    c.as_ref().map_or(crate::config::DEFAULT_PARTICLES, |c| c.transform.particles)
}

fn marginal_checkpoints(t0: f64, t1: f64) -> Vec<f64> {
    let defaults = [0.5, 1.0, 2.0];
    let inside: Vec<f64> = defaults.iter().copied().filter(|t| *t > t0 && *t <= t1 + 1e-12).collect();
    if inside.is_empty() {
        vec![t1]
    } else {
        inside
    }
}

fn write_report_rows<W: Write>(w: &mut W, benchmark: &str, reports: &[CheckReport]) -> std::io::Result<()> {
    for r in reports {
        writeln!(
            w,
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

fn score_config(cfg: &RunConfig) -> ScoreConfig {
    ScoreConfig {
        layer_width: cfg.transform.layer_width,
        ..ScoreConfig::default()
    }
}

/// Zero control for uncontrolled problems, otherwise the feedback of the
/// value solve on the preset's own discretisation.
pub fn feedback_for(p: &Preset) -> Result<Feedback, SolverError> {
    if matches!(p.spec.control_form(), ControlForm::Uncontrolled) {
        return Ok(Feedback::Zero);
    }
    let v = solve_hjb_dirichlet(&p.spec, &p.boundary, &p.grid, &p.time, &ValueConfig::default())?;
    Ok(v.feedback())
}

/// Output directory default: `out/<subcommand>` under the current directory.
pub fn default_out(cmd: Subcommand) -> PathBuf {
    Path::new("out").join(cmd.name())
}
