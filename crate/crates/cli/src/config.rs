//! Run configuration: a TOML file tagged with a schema string. Densities,
//! speeds and flows are read in the units chosen by `units` (or `--units`);
//! lengths are metres and times seconds throughout.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use arz_core::fd::prescribe_rho_m;
use arz_core::linearize::DEFAULT_SPEED_EPS;
use arz_core::observer::{DEFAULT_MAX_GAP_DATA, DEFAULT_MAX_GAP_SIM};
use arz_core::{FundamentalDiagram, Units};
use serde::{Deserialize, Serialize};

pub const SCHEMA: &str = "arz-observer/1";

/// Raised for anything wrong with the configuration itself.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub schema: String,
    #[serde(default)]
    pub units: Units,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelCfg,
    #[serde(default)]
    pub reference: ReferenceCfg,
    #[serde(default)]
    pub grid: GridCfg,
    #[serde(default)]
    pub initial: InitialCfg,
    #[serde(default)]
    pub boundary: BoundaryCfg,
    #[serde(default)]
    pub observer: ObserverCfg,
    #[serde(default)]
    pub data: DataCfg,
    #[serde(default)]
    pub calibration: CalibrationCfg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelCfg {
    pub tau: f64,
    pub length: f64,
    pub diagram: DiagramCfg,
}

impl Default for ModelCfg {
    fn default() -> Self {
        Self {
            tau: 60.0,
            length: 400.0,
            diagram: DiagramCfg::Greenshield { v_f: 40.0, rho_m: 0.16, gamma: 1.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiagramCfg {
    Greenshield { v_f: f64, rho_m: f64, gamma: f64 },
    ThreeParam { roundness: f64, p_shape: f64, alpha: f64, rho_m: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceCfg {
    pub rho_star: f64,
    /// Defaults to the equilibrium speed at `rho_star`.
    pub v_star: Option<f64>,
    pub speed_eps: f64,
}

impl Default for ReferenceCfg {
    fn default() -> Self {
        Self { rho_star: 0.12, v_star: None, speed_eps: DEFAULT_SPEED_EPS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridCfg {
    pub cells: usize,
    pub total_time: f64,
    pub cfl_safety: f64,
    /// Manual time step; refused if it breaks the CFL bound of the initial state.
    pub dt: Option<f64>,
    /// Steps between stored snapshots.
    pub sample_every: usize,
}

impl Default for GridCfg {
    fn default() -> Self {
        Self { cells: 41, total_time: 240.0, cfl_safety: 0.9, dt: None, sample_every: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialKind {
    Setpoint,
    Sinusoidal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialCfg {
    pub kind: InitialKind,
    /// Relative amplitude of the sinusoidal disturbance.
    pub amplitude: f64,
    pub mode: f64,
}

impl Default for InitialCfg {
    fn default() -> Self {
        Self { kind: InitialKind::Sinusoidal, amplitude: 0.1, mode: 3.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutletKind {
    Density,
    Velocity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundaryCfg {
    /// Defaults to `q*`.
    pub inlet_flux: Option<f64>,
    pub outlet: OutletKind,
    /// Defaults to `rho*` or `v*` depending on `outlet`.
    pub outlet_value: Option<f64>,
}

impl Default for BoundaryCfg {
    fn default() -> Self {
        Self { inlet_flux: None, outlet: OutletKind::Density, outlet_value: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExponentCfg {
    Outlet,
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainsCfg {
    Exact,
    LeadingOrder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObserverCfg {
    /// Relative offsets of the initial estimate from the reference.
    pub density_offset: f64,
    pub velocity_offset: f64,
    pub exponent: ExponentCfg,
    pub gains: GainsCfg,
    /// Defaults to 2 s for simulated and 30 s for data-derived measurements.
    pub max_gap: Option<f64>,
    pub velocity_floor: f64,
    /// CFL safety for data-driven runs, applied to the reference state.
    pub cfl_safety: f64,
    /// Threshold reported as the convergence time.
    pub threshold: f64,
}

impl Default for ObserverCfg {
    fn default() -> Self {
        Self {
            density_offset: 0.0,
            velocity_offset: 0.0,
            exponent: ExponentCfg::Outlet,
            gains: GainsCfg::Exact,
            max_gap: None,
            velocity_floor: 0.1,
            cfl_safety: 0.6,
            threshold: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryFormat {
    Generic,
    Ngsim,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropCfg {
    /// Start of the window after the first sample [s].
    pub t_offset: Option<f64>,
    pub duration: Option<f64>,
    pub x0: Option<f64>,
    pub x1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectedCfg {
    pub rho: f64,
    pub v: f64,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataCfg {
    /// Build trajectories from a simulated plant instead of reading a file.
    pub synthetic: bool,
    pub trajectories: Option<PathBuf>,
    pub format: TrajectoryFormat,
    pub measurements: Option<PathBuf>,
    pub scatter: Option<PathBuf>,
    pub cells_t: usize,
    pub cells_x: usize,
    /// Synthetic traces per vehicle.
    pub traces_per_vehicle: f64,
    /// Uniform noise added to synthetic positions, `+-position_noise` [m].
    pub position_noise: f64,
    #[serde(default)]
    pub crop: CropCfg,
    pub expected: Option<ExpectedCfg>,
    pub tolerance: f64,
}

impl Default for DataCfg {
    fn default() -> Self {
        Self {
            synthetic: false,
            trajectories: None,
            format: TrajectoryFormat::Generic,
            measurements: None,
            scatter: None,
            cells_t: 41,
            cells_x: 41,
            traces_per_vehicle: 1.0,
            position_noise: 0.0,
            crop: CropCfg::default(),
            expected: None,
            tolerance: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanesCfg {
    pub lanes: usize,
    pub vehicle_length: f64,
    pub safety_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationCfg {
    /// Fixed jam density; defaults to the model's.
    pub rho_m: Option<f64>,
    /// Jam density from lane count and headway, overriding `rho_m`.
    pub lanes: Option<LanesCfg>,
    pub taus: Vec<f64>,
    pub cfl_safety: f64,
}

impl Default for CalibrationCfg {
    fn default() -> Self {
        Self { rho_m: None, lanes: None, taus: (1..=10).map(|k| 10.0 * k as f64).collect(), cfl_safety: 0.5 }
    }
}

/// Every quantity in SI, defaults filled in.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub fd: FundamentalDiagram<f64>,
    pub tau: f64,
    pub length: f64,
    pub rho_star: f64,
    pub v_star: f64,
    pub inlet_flux: f64,
    pub outlet_value: f64,
    pub rho_m_fit: f64,
}

impl Config {
    pub fn baseline() -> Self {
        Self {
            schema: SCHEMA.into(),
            units: Units::Si,
            seed: 0,
            model: ModelCfg::default(),
            reference: ReferenceCfg::default(),
            grid: GridCfg::default(),
            initial: InitialCfg::default(),
            boundary: BoundaryCfg::default(),
            observer: ObserverCfg::default(),
            data: DataCfg::default(),
            calibration: CalibrationCfg::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| config_error(e.to_string()))?;
        if cfg.schema != SCHEMA {
            bail!(config_error(format!("schema is `{}`, expected `{SCHEMA}`", cfg.schema)));
        }
        Ok(cfg)
    }

    /// Loads `path`, resolving relative data paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("in {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.trajectories, &mut cfg.data.measurements, &mut cfg.data.scatter].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn diagram(&self) -> Result<FundamentalDiagram<f64>> {
        let u = self.units;
        let fd = match self.model.diagram {
            DiagramCfg::Greenshield { v_f, rho_m, gamma } => {
                FundamentalDiagram::greenshield(u.velocity_to_si(v_f), u.density_to_si(rho_m), gamma)
            }
            DiagramCfg::ThreeParam { roundness, p_shape, alpha, rho_m } => {
                FundamentalDiagram::three_param(roundness, p_shape, u.flow_to_si(alpha), u.density_to_si(rho_m))
            }
        };
        fd.map_err(|e| config_error(format!("model.diagram: {e}")))
    }

    /// Checks ranges and converts to SI.
    pub fn resolve(&self) -> Result<Resolved> {
        let u = self.units;
        let fd = self.diagram()?;
        let positive = |name: &str, x: f64| -> Result<()> {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(config_error(format!("{name} = {x} must be positive")))
            }
        };
        positive("model.tau", self.model.tau)?;
        positive("model.length", self.model.length)?;
        positive("grid.total_time", self.grid.total_time)?;
        positive("grid.cfl_safety", self.grid.cfl_safety)?;
        positive("observer.cfl_safety", self.observer.cfl_safety)?;
        positive("observer.threshold", self.observer.threshold)?;
        positive("data.traces_per_vehicle", self.data.traces_per_vehicle)?;
        positive("data.tolerance", self.data.tolerance)?;
        positive("calibration.cfl_safety", self.calibration.cfl_safety)?;
        if let Some(dt) = self.grid.dt {
            positive("grid.dt", dt)?;
        }
        if self.grid.cells < 2 {
            bail!(config_error("grid.cells must be at least 2"));
        }
        if self.data.cells_t == 0 || self.data.cells_x == 0 {
            bail!(config_error("data.cells_t and data.cells_x must be positive"));
        }
        if self.grid.cfl_safety > 1.0 || self.observer.cfl_safety > 1.0 || self.calibration.cfl_safety > 1.0 {
            bail!(config_error("CFL safety factors must not exceed 1"));
        }
        if !(self.data.position_noise >= 0.0) {
            bail!(config_error("data.position_noise must be non-negative"));
        }
        let rho_star = u.density_to_si(self.reference.rho_star);
        if !(rho_star > 0.0 && rho_star < fd.rho_max()) {
            bail!(config_error(format!(
                "reference.rho_star = {} outside (0, rho_m)",
                self.reference.rho_star
            )));
        }
        let v_star = self.reference.v_star.map_or(fd.velocity(rho_star), |v| u.velocity_to_si(v));
        let inlet_flux = self.boundary.inlet_flux.map_or(rho_star * v_star, |q| u.flow_to_si(q));
        let outlet_value = match (self.boundary.outlet, self.boundary.outlet_value) {
            (OutletKind::Density, Some(r)) => u.density_to_si(r),
            (OutletKind::Velocity, Some(v)) => u.velocity_to_si(v),
            (OutletKind::Density, None) => rho_star,
            (OutletKind::Velocity, None) => v_star,
        };
        let rho_m_fit = match (&self.calibration.lanes, self.calibration.rho_m) {
            (Some(l), _) => prescribe_rho_m(l.lanes, l.vehicle_length, l.safety_fraction)
                .map_err(|e| config_error(format!("calibration.lanes: {e}")))?,
            (None, Some(r)) => u.density_to_si(r),
            (None, None) => fd.rho_max(),
        };
        Ok(Resolved {
            fd,
            tau: self.model.tau,
            length: self.model.length,
            rho_star,
            v_star,
            inlet_flux,
            outlet_value,
            rho_m_fit,
        })
    }

    pub fn max_gap(&self, data: bool) -> f64 {
        self.observer.max_gap.unwrap_or(if data { DEFAULT_MAX_GAP_DATA } else { DEFAULT_MAX_GAP_SIM })
    }

    /// The configuration with derived defaults written out, in its own units.
    pub fn echo(&self, r: &Resolved) -> Result<String> {
        let u = self.units;
        let mut c = self.clone();
        c.reference.v_star = Some(u.velocity_from_si(r.v_star));
        c.boundary.inlet_flux = Some(u.flow_from_si(r.inlet_flux));
        c.boundary.outlet_value = Some(match c.boundary.outlet {
            OutletKind::Density => u.density_from_si(r.outlet_value),
            OutletKind::Velocity => u.velocity_from_si(r.outlet_value),
        });
        if c.calibration.lanes.is_none() {
            c.calibration.rho_m = Some(u.density_from_si(r.rho_m_fit));
        }
        Ok(toml::to_string(&c)?)
    }
}
