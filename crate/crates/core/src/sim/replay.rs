//! Offline adaptation over a recorded episode log.
//!
//! Replay drives the same perception pipeline as a live episode, minus the
//! planner and dynamics: poses, speeds, and measured roughness come from the
//! log, and sensor noise is regenerated from the per-tick streams. Map
//! snapshots at matching timestamps are therefore byte-identical to the
//! live run's.

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::feature_space::{ClusterSet, FeatureDescriptor};
use crate::planner::VehicleState;
use crate::sim::log::LogRecord;
use crate::sim::pipeline::Pipeline;
use crate::sim::world::World;

#[derive(Debug, Clone)]
pub struct ReplayOutcome {
    pub ticks: u64,
    pub snapshots: usize,
    /// (t, |predicted mean roughness - true roughness|) at the vehicle cell,
    /// for every tick carrying a ground-truth label once models exist.
    pub prediction_errors: Vec<(f64, f64)>,
    /// Malformed or truncated log lines skipped by the reader.
    pub warnings: usize,
}

/// Replays `records` through the perception pipeline. Snapshots are written
/// under `out_dir/snapshots/` at the same tick cadence as the live run.
pub fn replay_episode(
    records: &[LogRecord],
    warnings: usize,
    world: &World,
    clusters: &ClusterSet,
    config: &RunConfig,
    out_dir: Option<&Path>,
) -> Result<ReplayOutcome> {
    config.validate()?;
    let ticks: Vec<_> = records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Tick(t) => Some(t),
            _ => None,
        })
        .collect();
    if ticks.is_empty() {
        return Err(Error::invalid("log contains no tick records"));
    }
    let seed = match records.iter().find_map(|r| match r {
        LogRecord::Header(h) => Some(h),
        _ => None,
    }) {
        Some(h) => h.seed,
        None => config.seed,
    };

    let first = &ticks[0];
    let start = VehicleState { x: first.x, y: first.y, heading: first.heading, speed: first.speed };
    let mut pipeline = Pipeline::new(config, clusters.clone(), &start, seed)?;
    pipeline.apply_pins()?;

    let mut snapshots = 0;
    let mut prediction_errors = Vec::new();
    for record in &ticks {
        let pose = VehicleState {
            x: record.x,
            y: record.y,
            heading: record.heading,
            speed: record.speed,
        };
        pipeline.tick(record.tick, record.t, &pose, record.measured_roughness, world)?;

        if let Some(dir) = out_dir {
            let every = config.sim.snapshot_every_ticks;
            if every > 0 && record.tick % every == 0 {
                pipeline
                    .export_snapshot(&dir.join("snapshots").join(format!("snap_{:06}", record.tick)))?;
                snapshots += 1;
            }
        }

        if let (Some(truth), Some(model)) = (record.true_roughness, pipeline.cost_model.as_ref()) {
            if let Some((ix, iy)) = pipeline.grid.world_to_cell(pose.x, pose.y) {
                if let Some(desc) = pipeline.grid.descriptor(ix, iy) {
                    let descriptor = FeatureDescriptor::new(desc.to_vec())?;
                    let (mu, _) = model.predict(&descriptor, pose.speed);
                    prediction_errors.push((record.t, (mu - truth).abs()));
                }
            }
        }
    }

    Ok(ReplayOutcome {
        ticks: ticks.len() as u64,
        snapshots,
        prediction_errors,
        warnings,
    })
}
