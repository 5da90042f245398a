//! Run configuration.
//!
//! Everything a closed-loop run needs arrives in one TOML file; every field
//! has a sensible default so a minimal config is valid. Paths are resolved
//! relative to the config file's directory. A fully annotated example lives
//! at `configs/example.toml` in the repository.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSettings {
    /// Meters per cell.
    pub resolution: f64,
    pub width: usize,
    pub height: usize,
    /// EMA fusion constant in (0, 1].
    pub beta: f64,
    pub weight_cap: f64,
    /// Square structuring-element radius for OOD opening, cells.
    pub ood_open_radius: usize,
    /// Cost prior for cells never rasterized.
    pub initial_cost: f64,
}

impl Default for GridSettings {
    fn default() -> Self {
        GridSettings {
            resolution: 0.5,
            width: 120,
            height: 120,
            beta: 0.3,
            weight_cap: 1000.0,
            ood_open_radius: 1,
            initial_cost: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub signal_variance: f64,
    pub length_scale: f64,
    pub noise_variance: f64,
    /// Speed normalizer for model inputs (the configured maximum speed).
    pub max_speed: f64,
    /// Hard clamp on emitted speed limits, m/s.
    pub s_hard_max: f64,
    /// Refit at least this often, seconds.
    pub refit_interval_s: f64,
    /// ... or whenever this many new samples were accepted, whichever first.
    pub refit_sample_count: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            signal_variance: 0.25,
            length_scale: 1.0,
            noise_variance: 1e-3,
            max_speed: 6.0,
            s_hard_max: 6.0,
            refit_interval_s: 1.0,
            refit_sample_count: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BufferSettings {
    pub capacity: usize,
    pub speed_bin_width: f64,
}

impl Default for BufferSettings {
    fn default() -> Self {
        BufferSettings { capacity: 512, speed_bin_width: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RiskConfig {
    /// User risk tolerance for cost inflation, [0, 1).
    pub alpha_r: f64,
    /// Maximum desired roughness, [0, 1].
    pub r_max: f64,
    pub alpha_s_init: f64,
    pub alpha_s_min: f64,
    pub alpha_s_max: f64,
    /// alpha_s increment per qualifying step.
    pub delta_up: f64,
    /// alpha_s decrement per over-roughness step.
    pub delta_down: f64,
    /// "Within margin of the speed limit", m/s.
    pub speed_margin: f64,
    /// "Significantly less than R_max" margin.
    pub roughness_margin: f64,
}

impl Default for RiskConfig {
    fn default() -> Self {
        RiskConfig {
            alpha_r: 0.5,
            r_max: 0.3,
            alpha_s_init: 0.5,
            alpha_s_min: 0.0,
            alpha_s_max: 0.9,
            delta_up: 0.01,
            delta_down: 0.05,
            speed_margin: 0.5,
            roughness_margin: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub horizon: usize,
    pub dt: f64,
    pub rollouts: usize,
    pub lambda: f64,
    pub accel_std: f64,
    pub steer_rate_std: f64,
    pub lethal_penalty: f64,
    pub speed_violation_weight: f64,
    pub goal_weight: f64,
    /// Cost charged when a rollout crosses an unobserved cell.
    pub unknown_cost: f64,
    /// Rasterized cost at or above this counts as lethal.
    pub lethal_cost_threshold: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            horizon: 40,
            dt: 0.1,
            rollouts: 512,
            lambda: 0.1,
            accel_std: 1.0,
            steer_rate_std: 0.8,
            lethal_penalty: 500.0,
            speed_violation_weight: 2.0,
            goal_weight: 2.0,
            unknown_cost: 0.5,
            lethal_cost_threshold: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleConfig {
    pub wheelbase: f64,
    /// Steering angle clamp, rad.
    pub max_steer: f64,
    /// Acceleration clamp, m/s^2.
    pub max_accel: f64,
    /// Steer-rate clamp, rad/s.
    pub max_steer_rate: f64,
}

impl Default for VehicleConfig {
    fn default() -> Self {
        VehicleConfig { wheelbase: 2.5, max_steer: 0.5, max_accel: 2.0, max_steer_rate: 1.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimSettings {
    pub tick_hz: f64,
    /// Sensor range, m.
    pub fov: f64,
    pub sensor_half_angle_deg: f64,
    pub waypoint_tolerance: f64,
    pub stuck_timeout_s: f64,
    /// Minimum displacement per timeout window counting as progress, m.
    pub stuck_distance_m: f64,
    /// Map snapshot cadence; 0 disables snapshots.
    pub snapshot_every_ticks: u64,
    pub proprio_fs: f64,
    pub proprio_duration_s: f64,
    /// Rasterization query speed is max(vehicle speed, this floor).
    pub query_speed_floor: f64,
    /// Hard cap on episode length.
    pub max_ticks: u64,
}

impl Default for SimSettings {
    fn default() -> Self {
        SimSettings {
            tick_hz: 10.0,
            fov: 15.0,
            sensor_half_angle_deg: 60.0,
            waypoint_tolerance: 3.0,
            stuck_timeout_s: 30.0,
            stuck_distance_m: 1.0,
            snapshot_every_ticks: 100,
            proprio_fs: 100.0,
            proprio_duration_s: 1.0,
            query_speed_floor: 1.0,
            max_ticks: 40_000,
        }
    }
}

/// One-shot label: an explicit descriptor, or a cell picked from an
/// exported map snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinSpec {
    #[serde(default = "default_pin_roughness")]
    pub roughness: f64,
    pub speeds: Vec<f64>,
    #[serde(default)]
    pub descriptor: Option<Vec<f64>>,
    #[serde(default)]
    pub snapshot_cell: Option<SnapshotCell>,
}

fn default_pin_roughness() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotCell {
    /// Path to a snapshot's `meta.json`.
    pub meta: PathBuf,
    pub ix: usize,
    pub iy: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub laps: usize,
    /// World spec TOML; omitted means the built-in default world.
    pub world: Option<PathBuf>,
    /// Cluster file; omitted means fit clusters from world samples.
    pub clusters: Option<PathBuf>,
    /// Cluster count used when fitting from world samples.
    pub cluster_k: usize,
    /// Embedding sample count used when fitting from world samples.
    pub cluster_samples: usize,
    /// Roughness params TOML; omitted means the built-in accel-z default.
    pub roughness_params: Option<PathBuf>,
    pub grid: GridSettings,
    pub estimator: EstimatorConfig,
    pub buffer: BufferSettings,
    pub risk: RiskConfig,
    pub planner: PlannerConfig,
    pub vehicle: VehicleConfig,
    pub sim: SimSettings,
    pub pins: Vec<PinSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            laps: 5,
            world: None,
            clusters: None,
            cluster_k: 32,
            cluster_samples: 2000,
            roughness_params: None,
            grid: GridSettings::default(),
            estimator: EstimatorConfig::default(),
            buffer: BufferSettings::default(),
            risk: RiskConfig::default(),
            planner: PlannerConfig::default(),
            vehicle: VehicleConfig::default(),
            sim: SimSettings::default(),
            pins: Vec::new(),
        }
    }
}

impl RunConfig {
    /// Parses the file and resolves its relative paths against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
        let mut config: RunConfig =
            toml::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for p in [&mut config.world, &mut config.clusters, &mut config.roughness_params]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&p);
            }
        }
        for pin in &mut config.pins {
            if let Some(cell) = &mut pin.snapshot_cell {
                if cell.meta.is_relative() {
                    cell.meta = base.join(&cell.meta);
                }
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if !(g.resolution > 0.0) || g.width == 0 || g.height == 0 {
            return Err(Error::invalid("grid: resolution/width/height must be positive"));
        }
        if !(g.beta > 0.0 && g.beta <= 1.0) {
            return Err(Error::invalid("grid: beta must lie in (0, 1]"));
        }
        let e = &self.estimator;
        if !(e.signal_variance > 0.0 && e.length_scale > 0.0 && e.noise_variance > 0.0) {
            return Err(Error::invalid("estimator: variances and length scale must be positive"));
        }
        if !(e.max_speed > 0.0 && e.s_hard_max > 0.0) {
            return Err(Error::invalid("estimator: speed bounds must be positive"));
        }
        let r = &self.risk;
        if !(0.0..1.0).contains(&r.alpha_r) {
            return Err(Error::invalid("risk: alpha_r must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&r.r_max) {
            return Err(Error::invalid("risk: r_max must lie in [0, 1]"));
        }
        if !(0.0 <= r.alpha_s_min
            && r.alpha_s_min <= r.alpha_s_init
            && r.alpha_s_init <= r.alpha_s_max
            && r.alpha_s_max < 1.0)
        {
            return Err(Error::invalid(
                "risk: need 0 <= alpha_s_min <= alpha_s_init <= alpha_s_max < 1",
            ));
        }
        let p = &self.planner;
        if p.horizon == 0 || p.rollouts < 2 || !(p.lambda > 0.0) || !(p.dt > 0.0) {
            return Err(Error::invalid(
                "planner: need horizon >= 1, rollouts >= 2, lambda > 0, dt > 0",
            ));
        }
        if self.buffer.capacity < 2 || !(self.buffer.speed_bin_width > 0.0) {
            return Err(Error::invalid("buffer: capacity >= 2 and positive bin width required"));
        }
        if !(self.sim.tick_hz > 0.0) || self.laps == 0 {
            return Err(Error::invalid("sim: tick_hz and laps must be positive"));
        }
        for (i, pin) in self.pins.iter().enumerate() {
            if pin.descriptor.is_none() == pin.snapshot_cell.is_none() {
                return Err(Error::invalid(format!(
                    "pin {i}: exactly one of `descriptor` or `snapshot_cell` required"
                )));
            }
            if pin.speeds.is_empty() {
                return Err(Error::invalid(format!("pin {i}: needs at least one speed")));
            }
            if !(0.0..=1.0).contains(&pin.roughness) {
                return Err(Error::invalid(format!("pin {i}: roughness must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::format(format!("serialize config: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}
