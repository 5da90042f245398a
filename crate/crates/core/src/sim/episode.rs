//! Closed-loop episode: sense, fuse, learn, rasterize, plan, drive.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::Result;
use crate::estimator::cvar_tail_factor;
use crate::feature_space::ClusterSet;
use crate::planner::{dynamics_step, mppi_plan, Control, MppiParams, VehicleState};
use crate::proprio::{roughness, RoughnessParams};
use crate::seeds;
use crate::sim::log::{HeaderRecord, LogRecord, TickRecord, LOG_VERSION};
use crate::sim::pipeline::Pipeline;
use crate::sim::world::{synthesize_proprio, World};

/// Per-lap navigation metrics, mirroring the familiar table columns:
/// interactions (ticks on lethal cells), undesirable behavior (ticks on
/// over-budget terrain), average speed, average measured roughness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LapMetrics {
    pub lap: usize,
    pub interactions: u64,
    pub undesirable: u64,
    pub avg_speed: f64,
    pub avg_roughness: f64,
}

#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub records: Vec<LogRecord>,
    pub laps: Vec<LapMetrics>,
    pub ticks: u64,
    /// Set when the episode ended before completing its laps (vehicle stuck
    /// or tick budget exhausted), with a diagnostic.
    pub aborted: Option<String>,
}

struct LapAccumulator {
    lap: usize,
    interactions: u64,
    undesirable: u64,
    speed_sum: f64,
    roughness_sum: f64,
    ticks: u64,
}

impl LapAccumulator {
    fn new(lap: usize) -> Self {
        LapAccumulator {
            lap,
            interactions: 0,
            undesirable: 0,
            speed_sum: 0.0,
            roughness_sum: 0.0,
            ticks: 0,
        }
    }

    fn finish(&self) -> LapMetrics {
        let n = self.ticks.max(1) as f64;
        LapMetrics {
            lap: self.lap,
            interactions: self.interactions,
            undesirable: self.undesirable,
            avg_speed: self.speed_sum / n,
            avg_roughness: self.roughness_sum / n,
        }
    }
}

/// Runs a closed-loop episode over the course waypoints. Snapshots are
/// exported under `out_dir/snapshots/` at the configured cadence when an
/// output directory is given. Deterministic given (world, config).
pub fn run_episode(
    world: &World,
    clusters: &ClusterSet,
    roughness_params: &RoughnessParams,
    config: &RunConfig,
    out_dir: Option<&Path>,
) -> Result<EpisodeOutcome> {
    config.validate()?;
    // CVaR levels are validated up front so a bad config fails fast.
    cvar_tail_factor(config.risk.alpha_r)?;
    let seed = config.seed;
    let dt = 1.0 / config.sim.tick_hz;
    let waypoints = world.waypoints();
    let params =
        MppiParams::from_config(&config.planner, &config.vehicle, config.estimator.s_hard_max);

    let start = waypoints[0];
    let next = waypoints[1 % waypoints.len()];
    let mut state = VehicleState {
        x: start.0,
        y: start.1,
        heading: (next.1 - start.1).atan2(next.0 - start.0),
        speed: 0.0,
    };
    let mut steer = 0.0;

    let mut pipeline = Pipeline::new(config, clusters.clone(), &state, seed)?;
    pipeline.apply_pins()?;

    let mut records = Vec::new();
    records.push(LogRecord::Header(HeaderRecord {
        version: LOG_VERSION,
        seed,
        world_seed: world.spec().seed,
        tick_hz: config.sim.tick_hz,
        laps: config.laps,
        r_max: config.risk.r_max,
        alpha_r: config.risk.alpha_r,
    }));

    let proprio_duration = config
        .sim
        .proprio_duration_s
        .max(roughness_params.channels.iter().fold(0.0, |m, b| b.window_s.max(m)));

    let mut laps = Vec::new();
    let mut acc = LapAccumulator::new(0);
    let mut target_idx = 1usize % waypoints.len();
    let mut waypoints_hit = 0usize;
    let mut nominal: Vec<Control> = Vec::new();
    let mut aborted = None;
    let mut ticks = 0u64;

    // Stuck detection anchors.
    let mut anchor_pos = (state.x, state.y);
    let mut anchor_t = 0.0f64;

    for tick in 0..config.sim.max_ticks {
        ticks = tick + 1;
        let t = tick as f64 * dt;

        // Ground truth and measured proprioception at the current cell.
        let class = world.class_at(state.x, state.y);
        let true_roughness = class.map(|c| world.true_roughness(c, state.speed));
        let measured_roughness = match true_roughness {
            Some(r) => {
                let mut rng = seeds::stream(seed, "proprio", tick);
                let window = synthesize_proprio(
                    r,
                    roughness_params,
                    proprio_duration,
                    config.sim.proprio_fs,
                    &mut rng,
                )?;
                Some(roughness(&window, roughness_params)?)
            }
            None => None,
        };

        let perception = pipeline.tick(tick, t, &state, measured_roughness, world)?;

        if let Some(dir) = out_dir {
            let every = config.sim.snapshot_every_ticks;
            if every > 0 && tick % every == 0 {
                pipeline.export_snapshot(&dir.join("snapshots").join(format!("snap_{tick:06}")))?;
            }
        }

        let lethal = class.map(|c| world.is_lethal(c)).unwrap_or(false);
        let undesirable = !lethal
            && true_roughness.map(|r| r > config.risk.r_max + 0.1).unwrap_or(false);
        acc.ticks += 1;
        acc.speed_sum += state.speed;
        acc.roughness_sum += measured_roughness.unwrap_or(0.0);
        if lethal {
            acc.interactions += 1;
        }
        if undesirable {
            acc.undesirable += 1;
        }

        records.push(LogRecord::Tick(TickRecord {
            tick,
            t,
            x: state.x,
            y: state.y,
            heading: state.heading,
            speed: state.speed,
            steer,
            measured_roughness,
            true_roughness,
            speed_limit: perception.speed_limit,
            alpha_s: pipeline.risk.alpha_s,
            lethal,
            undesirable,
            lap: acc.lap,
        }));

        // Plan toward the current waypoint and advance the vehicle.
        let goal = waypoints[target_idx];
        let plan = mppi_plan(
            &state,
            steer,
            &pipeline.grid,
            goal,
            &nominal,
            &params,
            seeds::mix(seed, "mppi", tick),
        )?;
        nominal = plan.controls.clone();
        let (next_state, next_steer) = dynamics_step(&state, steer, &plan.controls[0], dt, &params);
        state = next_state;
        steer = next_steer;

        // Waypoint and lap progress.
        let d = ((state.x - goal.0).powi(2) + (state.y - goal.1).powi(2)).sqrt();
        if d <= config.sim.waypoint_tolerance {
            target_idx = (target_idx + 1) % waypoints.len();
            waypoints_hit += 1;
            if waypoints_hit % waypoints.len() == 0 {
                let metrics = acc.finish();
                records.push(LogRecord::Lap(metrics.clone()));
                laps.push(metrics);
                if laps.len() >= config.laps {
                    break;
                }
                acc = LapAccumulator::new(laps.len());
            }
        }

        // Stuck detection over a sliding window.
        if t - anchor_t >= config.sim.stuck_timeout_s {
            let moved = ((state.x - anchor_pos.0).powi(2) + (state.y - anchor_pos.1).powi(2)).sqrt();
            if moved < config.sim.stuck_distance_m {
                aborted = Some(format!(
                    "vehicle stuck: moved {moved:.2} m in {:.0} s at t = {t:.1} s",
                    config.sim.stuck_timeout_s
                ));
                break;
            }
            anchor_pos = (state.x, state.y);
            anchor_t = t;
        }
    }

    if aborted.is_none() && laps.len() < config.laps {
        aborted = Some(format!(
            "tick budget {} exhausted after {}/{} laps",
            config.sim.max_ticks,
            laps.len(),
            config.laps
        ));
    }

    Ok(EpisodeOutcome { records, laps, ticks, aborted })
}
