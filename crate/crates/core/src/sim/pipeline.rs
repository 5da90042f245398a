//! The perception/learning half of a tick, shared by live episodes and
//! offline replay so the two produce identical maps.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::bev::{BevGrid, GridConfig};
use crate::buffer::{BufferConfig, ExperienceBuffer, ExperienceSample};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::estimator::{
    fit_cost_model, fit_speed_model, rasterize, CostModel, GprHyperparams, RiskState, SpeedModel,
};
use crate::feature_space::{ClusterSet, FeatureDescriptor};
use crate::planner::VehicleState;
use crate::seeds;
use crate::sim::world::{sense, World};

/// What the perception half reports back to the caller each tick.
#[derive(Debug, Clone, Copy)]
pub struct TickPerception {
    /// Vehicle cell was known before this tick's sample insertion.
    pub cell_known: bool,
    /// Rasterized speed limit at the vehicle cell, when known.
    pub speed_limit: Option<f64>,
    /// A sample entered the buffer this tick.
    pub inserted: bool,
    /// Models were refit this tick.
    pub refit: bool,
}

/// Rolling map, experience buffer, models, and risk state.
pub struct Pipeline {
    pub grid: BevGrid,
    pub buffer: ExperienceBuffer,
    pub risk: RiskState,
    pub cost_model: Option<CostModel>,
    pub speed_model: Option<SpeedModel>,
    clusters: ClusterSet,
    config: RunConfig,
    seed: u64,
    hyper: GprHyperparams,
    last_refit_t: f64,
    new_since_refit: usize,
}

impl Pipeline {
    pub fn new(
        config: &RunConfig,
        clusters: ClusterSet,
        start: &VehicleState,
        seed: u64,
    ) -> Result<Self> {
        let g = &config.grid;
        let half_w = g.width as f64 * g.resolution / 2.0;
        let half_h = g.height as f64 * g.resolution / 2.0;
        let grid = BevGrid::new(GridConfig {
            resolution: g.resolution,
            width: g.width,
            height: g.height,
            origin: (start.x - half_w, start.y - half_h),
            k: clusters.k(),
            weight_cap: g.weight_cap,
            initial_cost: g.initial_cost,
            initial_speed: config.estimator.s_hard_max,
        })?;
        let buffer = ExperienceBuffer::new(BufferConfig {
            capacity: config.buffer.capacity,
            speed_bin_width: config.buffer.speed_bin_width,
            max_speed: config.estimator.max_speed,
        })?;
        let hyper = GprHyperparams {
            signal_variance: config.estimator.signal_variance,
            length_scale: config.estimator.length_scale,
            noise_variance: config.estimator.noise_variance,
        };
        Ok(Pipeline {
            grid,
            buffer,
            risk: RiskState::from_config(&config.risk),
            cost_model: None,
            speed_model: None,
            clusters,
            config: config.clone(),
            seed,
            hyper,
            last_refit_t: f64::NEG_INFINITY,
            new_since_refit: 0,
        })
    }

    pub fn clusters(&self) -> &ClusterSet {
        &self.clusters
    }

    /// Applies the config's one-shot labels to the buffer. Snapshot-cell
    /// pins read the descriptor out of an exported map.
    pub fn apply_pins(&mut self) -> Result<()> {
        for (i, pin) in self.config.pins.clone().iter().enumerate() {
            let descriptor = if let Some(values) = &pin.descriptor {
                FeatureDescriptor::new(values.clone())?
            } else if let Some(cell) = &pin.snapshot_cell {
                let (snap, _) = BevGrid::load(&cell.meta)?;
                let values = snap
                    .descriptor(cell.ix, cell.iy)
                    .ok_or_else(|| {
                        Error::invalid(format!(
                            "pin {i}: snapshot cell ({}, {}) is unknown",
                            cell.ix, cell.iy
                        ))
                    })?
                    .to_vec();
                FeatureDescriptor::new(values)?
            } else {
                return Err(Error::invalid(format!("pin {i}: no descriptor source")));
            };
            self.buffer.pin(descriptor, pin.roughness, &pin.speeds, 0.0)?;
        }
        Ok(())
    }

    fn sense_rng(&self, tick: u64) -> ChaCha8Rng {
        seeds::stream(self.seed, "sense", tick)
    }

    /// One perception tick: recenter, sense, fuse, store experience, adapt
    /// alpha_s, and refit/rasterize when due. `measured_roughness` comes
    /// from the proprioception path (live) or the log (replay).
    pub fn tick(
        &mut self,
        tick: u64,
        t: f64,
        pose: &VehicleState,
        measured_roughness: Option<f64>,
        world: &World,
    ) -> Result<TickPerception> {
        self.grid.recenter(pose.x, pose.y)?;
        let mut rng = self.sense_rng(tick);
        let observations = sense(
            world,
            pose,
            self.config.sim.fov,
            self.config.sim.sensor_half_angle_deg.to_radians(),
            &self.clusters,
            &self.grid,
            &mut rng,
        )?;
        self.grid.integrate(&observations, self.config.grid.beta)?;

        let cell = self.grid.world_to_cell(pose.x, pose.y);
        let known_cell = cell.filter(|&(ix, iy)| self.grid.is_known(ix, iy));
        let mut inserted = false;
        if let (Some((ix, iy)), Some(roughness)) = (known_cell, measured_roughness) {
            let descriptor =
                FeatureDescriptor::new(self.grid.descriptor(ix, iy).expect("known").to_vec())?;
            self.buffer.insert(ExperienceSample {
                descriptor,
                speed: pose.speed,
                roughness,
                timestamp: t,
                pinned: false,
            })?;
            self.new_since_refit += 1;
            inserted = true;
        }

        let speed_limit = known_cell.map(|(ix, iy)| self.grid.speed_limit_at(ix, iy));
        if self.cost_model.is_some() {
            if let (Some(limit), Some(roughness)) = (speed_limit, measured_roughness) {
                self.risk.update_alpha_s(pose.speed, limit, roughness);
            }
        }

        let due = !self.buffer.is_empty()
            && (self.cost_model.is_none()
                || t - self.last_refit_t >= self.config.estimator.refit_interval_s
                || self.new_since_refit >= self.config.estimator.refit_sample_count);
        if due {
            self.refit(t, pose.speed)?;
        }

        Ok(TickPerception {
            cell_known: known_cell.is_some(),
            speed_limit,
            inserted,
            refit: due,
        })
    }

    /// Full refit: both models from a buffer snapshot, then the OOD mask and
    /// fresh cost/speed layers.
    pub fn refit(&mut self, t: f64, vehicle_speed: f64) -> Result<()> {
        let snapshot = self.buffer.snapshot();
        let max_speed = self.config.estimator.max_speed;
        let hyper = self.hyper;
        let (cost_model, speed_model) = rayon::join(
            || fit_cost_model(&snapshot, hyper, max_speed),
            || fit_speed_model(&snapshot, hyper),
        );
        let cost_model = cost_model?;
        let speed_model = speed_model?;

        self.grid.apply_ood(&self.clusters, self.config.grid.ood_open_radius);
        let query_speed = vehicle_speed.max(self.config.sim.query_speed_floor);
        rasterize(
            &mut self.grid,
            &cost_model,
            &speed_model,
            &self.risk,
            query_speed,
            self.config.estimator.s_hard_max,
        )?;
        self.cost_model = Some(cost_model);
        self.speed_model = Some(speed_model);
        self.last_refit_t = t;
        self.new_since_refit = 0;
        Ok(())
    }

    /// Exports the grid plus the buffer checkpoint into `dir`.
    pub fn export_snapshot(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.buffer.save_checkpoint(&dir.join("buffer.txt"))?;
        self.grid.export(dir, Some(&self.config.estimator), Some("buffer.txt"))?;
        Ok(())
    }
}
