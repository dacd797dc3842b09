//! Density-based deterministic representation of controlled diffusions with
//! optimal stopping: alive-density propagation under absorbing boundaries,
//! score-corrected characteristics, value and costate solvers, and residual
//! checks of the first-order optimality system.

pub mod bench;
pub mod diagnostics;
pub mod error;
pub mod fokker_planck;
pub mod grid;
pub mod model;
pub mod optimality;
pub mod presets;
pub mod sde_mc;
pub mod transform;
pub mod value_hjb;

pub use error::{Result, SolverError};

/// Crate version, echoed in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
