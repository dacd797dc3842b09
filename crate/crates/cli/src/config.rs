//! Run configuration: a small TOML file naming a preset and overriding its
//! discretisation and solver settings.
//!
//! ```toml
//! preset = "ou"
//! seed = 7
//!
//! [grid]
//! x_min = -8.0
//! x_max = 8.0
//! dx = 0.01
//!
//! [time]
//! t1 = 2.0
//! dt = 0.001
//! ```

use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use density_steer::grid::{Grid1D, TimeGrid};
use density_steer::presets::{self, Preset, PRESET_IDS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
        /// Offending key, when the error is about one.
        key: Option<String>,
    },

    #[error("invalid `{field}`: {reason}")]
    Validation { field: String, reason: String },
}

impl ConfigError {
    fn invalid(field: &str, reason: &str) -> Self {
        ConfigError::Validation {
            field: field.to_string(),
            reason: reason.to_string(),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    preset: String,
    seed: Option<u64>,
    sigma: Option<f64>,
    #[serde(default)]
    grid: RawGrid,
    #[serde(default)]
    time: RawTime,
    #[serde(default)]
    mc: RawMc,
    #[serde(default)]
    transform: RawTransform,
    #[serde(default)]
    sweep: RawSweep,
    #[serde(default)]
    vi: RawVi,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    x_min: Option<f64>,
    x_max: Option<f64>,
    dx: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTime {
    t0: Option<f64>,
    t1: Option<f64>,
    dt: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMc {
    paths: Option<usize>,
    dt: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTransform {
    particles: Option<usize>,
    layer_width: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweep {
    max_iters: Option<usize>,
    tol: Option<f64>,
    damping: Option<f64>,
    initial_scale: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVi {
    stationary: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridParams {
    pub x_min: f64,
    pub x_max: f64,
    pub dx: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeParams {
    pub t0: f64,
    pub t1: f64,
    pub dt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McParams {
    pub paths: usize,
    pub dt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformParams {
    pub particles: usize,
    /// Score layer width; `None` keeps the solver default.
    pub layer_width: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepParams {
    pub max_iters: usize,
    pub tol: f64,
    pub damping: f64,
    /// Starting boundary scale for presets with a fitted boundary.
    pub initial_scale: f64,
}

/// Validated configuration with every default filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    /// Constant diffusion replacing the preset's.
    pub sigma: Option<f64>,
    pub grid: GridParams,
    pub time: TimeParams,
    pub mc: McParams,
    pub transform: TransformParams,
    pub sweep: SweepParams,
    /// Stationary obstacle solve; defaults to true for the perpetual put.
    pub vi_stationary: bool,
    /// Text the configuration was parsed from (empty for defaults).
    pub source: String,
}

pub const DEFAULT_SEED: u64 = 7;
pub const DEFAULT_PATHS: usize = 100_000;
pub const DEFAULT_PARTICLES: usize = 20_000;

impl RunConfig {
    /// Defaults of a preset, as if the file held only `preset = "<id>"`.
    pub fn for_preset(id: &str) -> Result<Self, ConfigError> {
        parse_config_str(&format!("preset = \"{id}\"\n"))
    }

    /// The preset with grid, time and diffusion overrides applied.
    pub fn resolve(&self) -> Result<Preset, ConfigError> {
        let mut p = presets::preset(&self.preset).map_err(|e| ConfigError::invalid("preset", &e.to_string()))?;
        p.grid = Grid1D::with_spacing(self.grid.x_min, self.grid.x_max, self.grid.dx)
            .map_err(|e| ConfigError::invalid("grid", &e.to_string()))?;
        p.time = TimeGrid::with_step(self.time.t0, self.time.t1, self.time.dt)
            .map_err(|e| ConfigError::invalid("time", &e.to_string()))?;
        if let Some(s) = self.sigma {
            p.spec = p.spec.with_sigma(s).map_err(|e| ConfigError::invalid("sigma", &e.to_string()))?;
        }
        Ok(p)
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<RunConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| parse_error(text, &e))?;
    validate(raw, text)
}

fn parse_error(text: &str, e: &toml::de::Error) -> ConfigError {
    let (line, column) = match e.span() {
        Some(span) => {
            let before = &text[..span.start.min(text.len())];
            let line = before.matches('\n').count() + 1;
            let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
            (line, column)
        }
        None => (0, 0),
    };
    let message = e.message().to_string();
    let key = message
        .strip_prefix("unknown field `")
        .and_then(|rest| rest.split('`').next())
        .map(str::to_string);
    ConfigError::Parse {
        line,
        column,
        message,
        key,
    }
}

fn positive(field: &str, v: f64) -> Result<f64, ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(ConfigError::invalid(field, "must be positive"))
    }
}

fn validate(raw: RawConfig, text: &str) -> Result<RunConfig, ConfigError> {
    if !PRESET_IDS.contains(&raw.preset.as_str()) {
        return Err(ConfigError::Validation {
            field: "preset".into(),
            reason: format!("unknown preset `{}` (known: {})", raw.preset, PRESET_IDS.join(", ")),
        });
    }
    let base = presets::preset(&raw.preset).map_err(|e| ConfigError::invalid("preset", &e.to_string()))?;

    let dx = positive("dx", raw.grid.dx.unwrap_or(base.grid.dx()))?;
    let x_min = raw.grid.x_min.unwrap_or(base.grid.x_min());
    let x_max = raw.grid.x_max.unwrap_or(base.grid.x_max());
    if !(x_max > x_min) {
        return Err(ConfigError::invalid("x_max", "must exceed x_min"));
    }
    let dt = positive("dt", raw.time.dt.unwrap_or(base.time.dt()))?;
    let t0 = raw.time.t0.unwrap_or(base.time.t0());
    let t1 = raw.time.t1.unwrap_or(base.time.t1());
    if !(t1 > t0) {
        return Err(ConfigError::invalid("t1", "must exceed t0"));
    }
    let sigma = raw.sigma.map(|s| positive("sigma", s)).transpose()?;

    let paths = raw.mc.paths.unwrap_or(DEFAULT_PATHS);
    if paths == 0 {
        return Err(ConfigError::invalid("paths", "must be positive"));
    }
    let mc_dt = positive("mc.dt", raw.mc.dt.unwrap_or(dt))?;

    let particles = raw.transform.particles.unwrap_or(DEFAULT_PARTICLES);
    if particles < 2 {
        return Err(ConfigError::invalid("particles", "must be at least 2"));
    }
    let bridge = raw.preset == "brownian_bridge";
    let layer_width = match raw.transform.layer_width {
        Some(w) => Some(positive("layer_width", w)?),
        None if bridge => Some(density_steer::bench::BRIDGE_SCORE_LAYER),
        None => None,
    };

    let max_iters = raw.sweep.max_iters.unwrap_or(if bridge { 30 } else { 200 });
    if max_iters == 0 {
        return Err(ConfigError::invalid("max_iters", "must be positive"));
    }
    let tol = positive("tol", raw.sweep.tol.unwrap_or(if bridge { 2e-2 } else { 1e-3 }))?;
    let damping = raw.sweep.damping.unwrap_or(0.5);
    if !(damping > 0.0 && damping <= 1.0) {
        return Err(ConfigError::invalid("damping", "must lie in (0, 1]"));
    }
    let initial_scale = positive("initial_scale", raw.sweep.initial_scale.unwrap_or(0.75))?;

    let cfg = RunConfig {
        vi_stationary: raw.vi.stationary.unwrap_or(raw.preset == "american_put_log"),
        preset: raw.preset,
        seed: raw.seed.unwrap_or(DEFAULT_SEED),
        sigma,
        grid: GridParams { x_min, x_max, dx },
        time: TimeParams { t0, t1, dt },
        mc: McParams { paths, dt: mc_dt },
        transform: TransformParams {
            particles,
            layer_width,
        },
        sweep: SweepParams {
            max_iters,
            tol,
            damping,
            initial_scale,
        },
        source: text.to_string(),
    };
    cfg.resolve()?;
    Ok(cfg)
}
