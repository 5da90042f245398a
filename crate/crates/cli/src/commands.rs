//! Command implementations. Each command is a plain function so tests can
//! drive them in-process.

use std::fmt::Write as _;
use std::path::Path;

use travmap::bev::BevGrid;
use travmap::buffer::{BufferConfig, ExperienceBuffer};
use travmap::config::RunConfig;
use travmap::error::{Error, Result};
use travmap::estimator::{fit_cost_model, fit_speed_model, rasterize, GprHyperparams, RiskState};
use travmap::feature_space::{fit_clusters as fit_cluster_set, ClusterSet, Embedding};
use travmap::proprio::{fit_roughness_params, load_segments, RoughnessParams};
use travmap::sim::{
    generate_world, read_log, replay_episode, run_episode, sample_embeddings, write_log,
    LapMetrics, World, WorldSpec,
};

fn read_embeddings(path: &Path) -> Result<Vec<Embedding>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    let mut embeddings = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let values: std::result::Result<Vec<f64>, _> =
            line.split_whitespace().map(|t| t.parse::<f64>()).collect();
        let values =
            values.map_err(|_| Error::format(format!("{} line {}: bad value", path.display(), i + 1)))?;
        embeddings.push(Embedding::new(values).map_err(|e| {
            Error::format(format!("{} line {}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(embeddings)
}

pub fn fit_clusters(embeddings: &Path, k: usize, seed: u64, out: &Path) -> Result<()> {
    let samples = read_embeddings(embeddings)?;
    let clusters = fit_cluster_set(&samples, k, seed)?;
    clusters.save(out)?;
    println!(
        "fitted {} clusters of dim {} from {} embeddings; tau = {}",
        clusters.k(),
        clusters.dim(),
        samples.len(),
        clusters.tau()
    );
    Ok(())
}

pub fn fit_roughness(segments: &Path, seed: u64, out: &Path) -> Result<()> {
    let segments = load_segments(segments)?;
    let fit = fit_roughness_params(&segments, seed)?;
    fit.params.save(out)?;
    println!("cumulative L1 loss: {}", fit.loss);
    Ok(())
}

/// World, clusters, and roughness parameters for a run: loaded from the
/// config's paths, or derived deterministically from the run seed and
/// written next to the outputs for reuse.
pub(crate) fn prepare_inputs(
    config: &RunConfig,
    out: &Path,
) -> Result<(World, ClusterSet, RoughnessParams)> {
    let spec = match &config.world {
        Some(path) => WorldSpec::load(path)?,
        None => WorldSpec { seed: config.seed, ..WorldSpec::default() },
    };
    let world = generate_world(&spec)?;
    spec.save(&out.join("world.toml"))?;

    let clusters = match &config.clusters {
        Some(path) => ClusterSet::load(path)?,
        None => {
            let samples = sample_embeddings(&world, config.cluster_samples, config.seed);
            let clusters = fit_cluster_set(&samples, config.cluster_k, config.seed)?;
            clusters.save(&out.join("clusters.txt"))?;
            clusters
        }
    };

    let roughness = match &config.roughness_params {
        Some(path) => RoughnessParams::load(path)?,
        None => {
            let params = RoughnessParams::default_accel_z();
            params.save(&out.join("roughness.toml"))?;
            params
        }
    };
    Ok((world, clusters, roughness))
}

fn write_metrics_csv(path: &Path, laps: &[LapMetrics]) -> Result<()> {
    let mut out = String::from("lap,interactions,undesirable,avg_speed_mps,avg_roughness\n");
    for m in laps {
        writeln!(
            out,
            "{},{},{},{},{}",
            m.lap, m.interactions, m.undesirable, m.avg_speed, m.avg_roughness
        )
        .expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn simulate(config_path: &Path, laps: Option<usize>, out: &Path) -> Result<()> {
    let mut config = RunConfig::load(config_path)?;
    if let Some(laps) = laps {
        config.laps = laps;
        config.validate()?;
    }
    std::fs::create_dir_all(out)?;
    let (world, clusters, roughness) = prepare_inputs(&config, out)?;

    let outcome = run_episode(&world, &clusters, &roughness, &config, Some(out))?;
    write_log(&out.join("episode.jsonl"), &outcome.records)?;
    write_metrics_csv(&out.join("metrics.csv"), &outcome.laps)?;

    println!("lap  interactions  undesirable  avg_speed  avg_roughness");
    for m in &outcome.laps {
        println!(
            "{:<4} {:<13} {:<12} {:<10.2} {:.3}",
            m.lap + 1,
            m.interactions,
            m.undesirable,
            m.avg_speed,
            m.avg_roughness
        );
    }
    println!("{} ticks, {} laps", outcome.ticks, outcome.laps.len());
    match outcome.aborted {
        Some(reason) => Err(Error::Aborted(reason)),
        None => Ok(()),
    }
}

pub fn replay(log_path: &Path, config_path: &Path, out: &Path) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    std::fs::create_dir_all(out)?;
    let (world, clusters, _) = prepare_inputs(&config, out)?;
    let (records, warnings) = read_log(log_path)?;

    let outcome = replay_episode(&records, warnings, &world, &clusters, &config, Some(out))?;

    let mut csv = String::from("t,abs_prediction_error\n");
    for (t, err) in &outcome.prediction_errors {
        writeln!(csv, "{t},{err}").expect("string write");
    }
    std::fs::write(out.join("prediction_error.csv"), csv)?;

    println!(
        "replayed {} ticks, wrote {} snapshots, {} prediction-error rows, {} skipped log lines",
        outcome.ticks,
        outcome.snapshots,
        outcome.prediction_errors.len(),
        outcome.warnings
    );
    Ok(())
}

pub fn export_maps(
    snapshot: &Path,
    speeds: &[f64],
    rmaxes: &[f64],
    alpha: f64,
    out: &Path,
) -> Result<()> {
    if speeds.is_empty() || rmaxes.is_empty() {
        return Err(Error::invalid("need at least one --speed and one --rmax"));
    }
    let (grid, meta) = BevGrid::load(snapshot)?;
    let estimator = meta
        .estimator
        .ok_or_else(|| Error::invalid("snapshot carries no estimator settings"))?;
    let buffer_file = meta
        .layers
        .buffer
        .ok_or_else(|| Error::invalid("snapshot carries no buffer checkpoint"))?;
    let dir = snapshot.parent().unwrap_or_else(|| Path::new("."));
    let buffer = ExperienceBuffer::load_checkpoint(
        &dir.join(buffer_file),
        BufferConfig {
            capacity: usize::MAX / 2,
            speed_bin_width: 1.0,
            max_speed: estimator.max_speed,
        },
    )?;
    if buffer.is_empty() {
        return Err(Error::invalid("snapshot buffer checkpoint is empty"));
    }

    let snapshot_samples = buffer.snapshot();
    let hyper = GprHyperparams {
        signal_variance: estimator.signal_variance,
        length_scale: estimator.length_scale,
        noise_variance: estimator.noise_variance,
    };
    let cost_model = fit_cost_model(&snapshot_samples, hyper, estimator.max_speed)?;
    let speed_model = fit_speed_model(&snapshot_samples, hyper)?;

    std::fs::create_dir_all(out)?;
    for &speed in speeds {
        let mut risk = RiskState::from_config(&travmap::config::RiskConfig::default());
        risk.alpha_r = alpha;
        risk.alpha_s = alpha;
        risk.r_max = rmaxes[0];
        let mut g = grid.clone();
        rasterize(&mut g, &cost_model, &speed_model, &risk, speed, estimator.s_hard_max)?;
        g.export_cost_csv(&out.join(format!("cost_s{speed}.csv")))?;
    }
    for &rmax in rmaxes {
        if !(0.0..=1.0).contains(&rmax) {
            return Err(Error::invalid(format!("rmax {rmax} outside [0, 1]")));
        }
        let mut risk = RiskState::from_config(&travmap::config::RiskConfig::default());
        risk.alpha_r = alpha;
        risk.alpha_s = alpha;
        risk.r_max = rmax;
        let mut g = grid.clone();
        rasterize(&mut g, &cost_model, &speed_model, &risk, speeds[0], estimator.s_hard_max)?;
        g.export_speed_csv(&out.join(format!("speed_rmax{rmax}.csv")))?;
    }
    println!(
        "exported {} cost layers and {} speed layers from {} buffer samples",
        speeds.len(),
        rmaxes.len(),
        snapshot_samples.len()
    );
    Ok(())
}
