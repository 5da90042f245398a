//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured values once its assertions hold.
//!
//! Timing-sensitive criteria share a lock so wall-clock measurements are
//! never contaminated by a concurrently running test.

use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use travmap::bev::{morphological_open, BevGrid, CellObservation, GridConfig, Mask};
use travmap::buffer::{BufferConfig, ExperienceBuffer, ExperienceSample};
use travmap::config::RunConfig;
use travmap::estimator::{
    cvar_adjust, fit_cost_model, fit_speed_model, rasterize, GprHyperparams, GprModel, RiskState,
};
use travmap::feature_space::{fit_clusters, vlad_descriptor, ClusterSet, Embedding, FeatureDescriptor};
use travmap::planner::{mppi_plan, MppiParams, VehicleState};
use travmap::proprio::{bandpower, roughness, RoughnessParams};
use travmap::sim::{
    generate_world, run_episode, sample_embeddings, synthesize_proprio, TerrainClass, World,
    WorldSpec,
};

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: OnceLock<Mutex<()>> = OnceLock::new();
    LOCK.get_or_init(|| Mutex::new(()))
        .lock()
        .unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn assert_runtime(criterion: u32, elapsed: Duration, budget: Duration) {
    assert!(
        elapsed <= budget,
        "criterion {criterion} runtime {elapsed:?} exceeds budget {budget:?}"
    );
}

// --- 1. GPR oracle equivalence ---------------------------------------------

/// Dense solve on an independently rebuilt kernel via LU, no factorization
/// reuse.
fn dense_gpr_oracle(
    inputs: &[Vec<f64>],
    targets: &[f64],
    h: &GprHyperparams,
    query: &[f64],
) -> (f64, f64) {
    let n = inputs.len();
    let kernel = |a: &[f64], b: &[f64]| {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        h.signal_variance * (-d2 / (2.0 * h.length_scale * h.length_scale)).exp()
    };
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            k[(i, j)] = kernel(&inputs[i], &inputs[j]);
        }
        k[(i, i)] += h.noise_variance;
    }
    let k_star = DVector::from_fn(n, |i, _| kernel(&inputs[i], query));
    let lu = k.lu();
    let alpha = lu.solve(&DVector::from_row_slice(targets)).expect("solvable");
    let beta = lu.solve(&k_star).expect("solvable");
    (k_star.dot(&alpha), h.signal_variance - k_star.dot(&beta))
}

#[test]
fn c01_gpr_matches_dense_oracle() {
    let _guard = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_mean = 0.0f64;
    let mut worst_var = 0.0f64;
    for problem in 0..50 {
        let h = GprHyperparams {
            signal_variance: [0.25, 1.0, 0.5][problem % 3],
            length_scale: [1.0, 0.7, 1.5][problem % 3],
            noise_variance: [1e-3, 1e-2, 1e-4][problem % 3],
        };
        let inputs: Vec<Vec<f64>> =
            (0..20).map(|_| (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let targets: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let model = GprModel::fit(&inputs, &targets, h).unwrap();
        for _ in 0..4 {
            let q: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.5..2.5)).collect();
            let (mu, var) = model.predict(&q);
            let (mu_o, var_o) = dense_gpr_oracle(&inputs, &targets, &h, &q);
            worst_mean = worst_mean.max((mu - mu_o).abs());
            worst_var = worst_var.max((var - var_o).abs());
        }
    }
    assert!(worst_mean < 1e-8, "worst mean deviation {worst_mean}");
    assert!(worst_var < 1e-8, "worst variance deviation {worst_var}");
    let elapsed = start.elapsed();
    assert_runtime(1, elapsed, Duration::from_secs(5));
    println!(
        "ACCEPTANCE 1 PASS: GPR vs dense oracle, worst |d mean| = {worst_mean:.2e}, \
         worst |d var| = {worst_var:.2e} over 50 problems in {elapsed:?}"
    );
}

// --- 2. CVaR correctness ----------------------------------------------------

#[test]
fn c02_cvar_matches_monte_carlo_tail() {
    let _guard = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let n = 1_000_000usize;
    let mut samples: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    samples.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let mut report = String::new();
    for alpha in [0.5, 0.9, 0.95] {
        let cut = (alpha * n as f64) as usize;
        let tail = &samples[cut..];
        let mc = tail.iter().sum::<f64>() / tail.len() as f64;
        let analytic = cvar_adjust(0.0, 1.0, alpha).unwrap();
        let rel = (analytic - mc).abs() / mc.abs();
        assert!(rel < 0.01, "alpha {alpha}: analytic {analytic} vs MC {mc} (rel {rel})");
        report.push_str(&format!("a={alpha}: {rel:.4} "));
    }
    for (mu, v) in [(0.0, 1.0), (-2.5, 4.0), (7.0, 0.0)] {
        assert_eq!(cvar_adjust(mu, v, 0.0).unwrap(), mu, "alpha 0 must return mu exactly");
    }
    let elapsed = start.elapsed();
    assert_runtime(2, elapsed, Duration::from_secs(10));
    println!(
        "ACCEPTANCE 2 PASS: CVaR within 1% of 1e6-sample Gaussian tails ({report}), \
         alpha = 0 exact, in {elapsed:?}"
    );
}

// --- 3. Bandpower correctness ------------------------------------------------

#[test]
fn c03_bandpower_parseval_leakage_additivity() {
    let _guard = serial();
    let start = Instant::now();
    let fs = 100.0;
    let tone: Vec<f64> =
        (0..400).map(|i| (std::f64::consts::TAU * 5.0 * i as f64 / fs).sin()).collect();

    let in_band = bandpower(&tone, fs, 3.0, 7.0).unwrap();
    let parseval = 0.5; // A^2 / 2 for a unit tone
    let tone_err = (in_band - parseval).abs() / parseval;
    assert!(tone_err < 0.05, "tone power {in_band} vs {parseval}");

    let leak = bandpower(&tone, fs, 20.0, 40.0).unwrap();
    assert!(leak < 0.01 * parseval, "out-of-band leakage {leak}");

    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let noise: Vec<f64> = (0..512).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut worst_split = 0.0f64;
    for split in [5.0, 13.37, 21.0, 33.333, 44.4] {
        let a = bandpower(&noise, fs, 1.0, split).unwrap();
        let b = bandpower(&noise, fs, split, 49.0).unwrap();
        let whole = bandpower(&noise, fs, 1.0, 49.0).unwrap();
        worst_split = worst_split.max(((a + b) - whole).abs() / whole);
    }
    assert!(worst_split < 1e-12, "additivity off by {worst_split}");
    let elapsed = start.elapsed();
    assert_runtime(3, elapsed, Duration::from_secs(1));
    println!(
        "ACCEPTANCE 3 PASS: pure tone within {:.2}% of A^2/2, leakage {leak:.2e}, \
         split additivity {worst_split:.2e}, in {elapsed:?}",
        tone_err * 100.0
    );
}

// --- 4. Buffer strategy direction -------------------------------------------

/// Four well-separated synthetic classes compressed through a real cluster
/// set, so nearest-class assignment works exactly as in production.
struct DescriptorFactory {
    clusters: ClusterSet,
    means: Vec<Vec<f64>>,
    rng: ChaCha8Rng,
}

impl DescriptorFactory {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let means: Vec<Vec<f64>> =
            (0..4).map(|_| (0..8).map(|_| rng.gen_range(0.0..4.0)).collect()).collect();
        let mut samples = Vec::new();
        for mean in &means {
            for _ in 0..40 {
                let v: Vec<f64> = mean.iter().map(|m| m + rng.gen_range(-0.05..0.05)).collect();
                samples.push(Embedding::new(v).unwrap());
            }
        }
        let clusters = fit_clusters(&samples, 4, seed).unwrap();
        DescriptorFactory { clusters, means, rng }
    }

    fn descriptor(&mut self, class: usize) -> FeatureDescriptor {
        let v: Vec<f64> =
            self.means[class].iter().map(|m| m + self.rng.gen_range(-0.05..0.05)).collect();
        vlad_descriptor(&Embedding::new(v).unwrap(), &self.clusters).unwrap()
    }
}

fn apd_for_stream(stream: &[(usize, f64)], capacity: usize, seed: u64) -> (f64, f64) {
    let config = BufferConfig { capacity, speed_bin_width: 1.0, max_speed: 6.0 };
    let mut factory = DescriptorFactory::new(seed);
    let mut ours = ExperienceBuffer::new(config.clone()).unwrap();
    let mut fifo_window: Vec<ExperienceSample> = Vec::new();
    for (i, &(class, speed)) in stream.iter().enumerate() {
        let sample = ExperienceSample {
            descriptor: factory.descriptor(class),
            speed,
            roughness: 0.2,
            timestamp: i as f64,
            pinned: false,
        };
        ours.insert(sample.clone()).unwrap();
        fifo_window.push(sample);
        if fifo_window.len() > capacity {
            fifo_window.remove(0);
        }
    }
    let mut fifo = ExperienceBuffer::new(config).unwrap();
    for s in fifo_window {
        fifo.insert(s).unwrap();
    }
    (ours.avg_pairwise_distance().unwrap(), fifo.avg_pairwise_distance().unwrap())
}

#[test]
fn c04_balanced_eviction_beats_fifo_by_ten_percent() {
    let _guard = serial();
    let start = Instant::now();

    // Scenario 1: diverse warm-up, then a long single-terrain flood.
    let mut s1: Vec<(usize, f64)> = Vec::new();
    for i in 0..200 {
        s1.push((i % 4, (i % 5) as f64 + 0.5));
    }
    for _ in 0..1000 {
        s1.push((0, 2.5));
    }

    // Scenario 2: 90% one class throughout, minorities sprinkled.
    let mut s2: Vec<(usize, f64)> = Vec::new();
    for i in 0..1200 {
        if i % 10 == 0 {
            s2.push((1 + (i / 10) % 3, (i % 4) as f64 + 0.5));
        } else {
            s2.push((0, 1.5));
        }
    }

    // Scenario 3: one class flooding a single speed bin while rare samples
    // cover other classes and speeds.
    let mut s3: Vec<(usize, f64)> = Vec::new();
    for i in 0..300 {
        s3.push(((i % 2) * 2, (i % 6) as f64 + 0.2));
    }
    for i in 0..900 {
        if i % 15 == 0 {
            s3.push((3, 5.5));
        } else {
            s3.push((1, 0.5));
        }
    }

    let mut report = String::new();
    for (name, stream) in [("S1", &s1), ("S2", &s2), ("S3", &s3)] {
        let (ours, fifo) = apd_for_stream(stream, 256, 404);
        let ratio = ours / fifo;
        assert!(
            ratio >= 1.10,
            "{name}: balanced {ours:.3} vs FIFO {fifo:.3} (ratio {ratio:.3} < 1.10)"
        );
        report.push_str(&format!("{name} {ours:.2}/{fifo:.2} = {ratio:.2} "));
    }
    let elapsed = start.elapsed();
    assert_runtime(4, elapsed, Duration::from_secs(30));
    println!("ACCEPTANCE 4 PASS: avg pairwise distance ratios {report}in {elapsed:?}");
}

// --- 5. Fast adaptation ------------------------------------------------------

/// Corridor world: trail for x < boundary, smooth grass beyond. The grass
/// class is visible to the feature space but absent from the buffer until
/// the vehicle first drives onto it.
fn corridor_world(seed: u64, boundary_m: f64) -> World {
    let spec = WorldSpec {
        seed,
        size: 120,
        patch_count: 0,
        tree_clusters: 0,
        trees_block_shortcuts: false,
        foreign_patch_cells: 0,
        course_a: 25.0,
        course_b: 20.0,
        ..WorldSpec::default()
    };
    let probe = generate_world(&spec).unwrap();
    let size = spec.size;
    let mut cells = vec![TerrainClass::SmoothGrass; size * size];
    for iy in 0..size {
        for ix in 0..size {
            let x = (ix as f64 + 0.5) * spec.resolution;
            if x < boundary_m {
                cells[iy * size + ix] = TerrainClass::Trail;
            }
        }
    }
    let means: Vec<Vec<f64>> = [
        TerrainClass::Trail,
        TerrainClass::SmoothGrass,
        TerrainClass::RoughGrass,
        TerrainClass::Gravel,
        TerrainClass::Tree,
        TerrainClass::Foreign,
    ]
    .iter()
    .map(|c| probe.class_mean(*c).to_vec())
    .collect();
    let waypoints = vec![(6.0, 30.0), (54.0, 30.0)];
    World::from_parts(spec, cells, means, waypoints).unwrap()
}

#[test]
fn c05_grass_cost_error_drops_within_ten_seconds() {
    let _guard = serial();
    let start = Instant::now();
    let world = corridor_world(505, 30.0);
    let clusters = fit_clusters(&sample_embeddings(&world, 1500, 505), 16, 505).unwrap();
    let params = RoughnessParams::default_accel_z();
    let mut config = RunConfig::default();
    config.seed = 505;
    let drive_speed = 2.0;
    let truth = world.true_roughness(TerrainClass::SmoothGrass, drive_speed);

    let start_pose = VehicleState { x: 6.0, y: 30.0, heading: 0.0, speed: drive_speed };
    let mut pipeline = travmap::sim::Pipeline::new(&config, clusters, &start_pose, 505).unwrap();

    let mut first_grass_t = None;
    let mut pass_t = None;
    for tick in 0..480u64 {
        let t = tick as f64 * 0.1;
        let pose = VehicleState {
            x: 6.0 + drive_speed * t,
            y: 30.0,
            heading: 0.0,
            speed: drive_speed,
        };
        let class = world.class_at(pose.x, pose.y).unwrap();
        if class == TerrainClass::SmoothGrass && first_grass_t.is_none() {
            first_grass_t = Some(t);
        }
        let true_r = world.true_roughness(class, pose.speed);
        let mut rng = travmap::seeds::stream(505, "proprio", tick);
        let window = synthesize_proprio(true_r, &params, 1.0, 100.0, &mut rng).unwrap();
        let measured = roughness(&window, &params).unwrap();
        let perception = pipeline.tick(tick, t, &pose, Some(measured), &world).unwrap();

        // Evaluate at refits: mean cost error over held-out grass cells
        // (known map cells off the driven line).
        if perception.refit && first_grass_t.is_some() && pass_t.is_none() {
            if let Some(model) = pipeline.cost_model.as_ref() {
                let mut errors = Vec::new();
                for (ix, iy) in pipeline.grid.known_cells() {
                    let (wx, wy) = pipeline.grid.cell_center(ix, iy);
                    if world.class_at(wx, wy) != Some(TerrainClass::SmoothGrass)
                        || (wy - 30.0).abs() < 2.0
                        || pipeline.grid.weight_at(ix, iy) < 3.0
                    {
                        continue;
                    }
                    let desc = FeatureDescriptor::new(
                        pipeline.grid.descriptor(ix, iy).unwrap().to_vec(),
                    )
                    .unwrap();
                    let (mu, _) = model.predict(&desc, drive_speed);
                    errors.push((mu - truth).abs());
                }
                if errors.len() >= 30 {
                    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
                    if mean < 0.10 {
                        pass_t = Some((t, mean, errors.len()));
                    }
                }
            }
        }
        if pass_t.is_some() {
            break;
        }
    }

    let first = first_grass_t.expect("vehicle reached grass");
    let (when, err, cells) = pass_t.expect("cost error never dropped below 0.10");
    assert!(
        when - first <= 10.0,
        "error reached {err:.3} only {:.1}s after first grass contact",
        when - first
    );
    let elapsed = start.elapsed();
    assert_runtime(5, elapsed, Duration::from_secs(120));
    println!(
        "ACCEPTANCE 5 PASS: mean grass cost error {err:.3} over {cells} held-out cells \
         {:.1}s after first traversal (budget 10s), in {elapsed:?}",
        when - first
    );
}

// --- 6. Risk-tolerance ordering ----------------------------------------------

fn ordering_world_spec(seed: u64) -> WorldSpec {
    WorldSpec {
        seed,
        size: 120,
        course_a: 20.0,
        course_b: 16.0,
        waypoint_spacing: 10.0,
        patch_count: 8,
        tree_clusters: 0,
        trees_block_shortcuts: false,
        foreign_patch_cells: 0,
        ..WorldSpec::default()
    }
}

fn episode_averages(world: &World, clusters: &ClusterSet, config: &RunConfig) -> (f64, f64) {
    let params = RoughnessParams::default_accel_z();
    let outcome = run_episode(world, clusters, &params, config, None).unwrap();
    assert!(outcome.aborted.is_none(), "aborted: {:?}", outcome.aborted);
    let n = outcome.laps.len() as f64;
    (
        outcome.laps.iter().map(|l| l.avg_speed).sum::<f64>() / n,
        outcome.laps.iter().map(|l| l.avg_roughness).sum::<f64>() / n,
    )
}

#[test]
fn c06_lower_roughness_budget_is_slower_and_smoother() {
    let _guard = serial();
    let start = Instant::now();
    let mut wins = 0;
    let mut report = String::new();
    for (i, seed) in [601u64, 602, 603, 604, 605].iter().enumerate() {
        let world = generate_world(&ordering_world_spec(*seed)).unwrap();
        let clusters = fit_clusters(&sample_embeddings(&world, 1200, *seed), 24, *seed).unwrap();
        let mut config = RunConfig::default();
        config.seed = *seed;
        config.laps = 2;
        config.sim.snapshot_every_ticks = 0;

        config.risk.r_max = 0.2;
        let (speed_low, rough_low) = episode_averages(&world, &clusters, &config);
        config.risk.r_max = 0.4;
        let (speed_high, rough_high) = episode_averages(&world, &clusters, &config);

        let ok = rough_low <= rough_high && speed_low <= speed_high;
        if ok {
            wins += 1;
        }
        report.push_str(&format!(
            "pair {}: v {:.2}/{:.2} r {:.3}/{:.3} {} ",
            i + 1,
            speed_low,
            speed_high,
            rough_low,
            rough_high,
            if ok { "ok" } else { "X" }
        ));
    }
    assert!(wins >= 4, "ordering held in only {wins}/5 pairs: {report}");
    let elapsed = start.elapsed();
    assert_runtime(6, elapsed, Duration::from_secs(600));
    println!("ACCEPTANCE 6 PASS: {report}({wins}/5 pairs) in {elapsed:?}");
}

// --- 7. One-shot augmentation --------------------------------------------------

fn pin_world_spec(seed: u64) -> WorldSpec {
    WorldSpec {
        seed,
        size: 120,
        course_a: 20.0,
        course_b: 16.0,
        waypoint_spacing: 12.0,
        patch_count: 6,
        tree_clusters: 2,
        trees_block_shortcuts: true,
        ..WorldSpec::default()
    }
}

/// Expected tree descriptor under sensing noise: the Monte-Carlo mean of
/// noisy VLAD views, i.e. what a fused map cell converges to.
fn expected_descriptor(world: &World, clusters: &ClusterSet, class: TerrainClass, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise =
        rand_distr::Normal::new(0.0, world.spec().embedding_noise_std).expect("valid std");
    let mean = world.class_mean(class);
    let draws = 3000;
    let mut acc = vec![0.0; clusters.k()];
    for _ in 0..draws {
        let values: Vec<f64> = mean.iter().map(|m| m + noise.sample(&mut rng)).collect();
        let d = vlad_descriptor(&Embedding::new(values).unwrap(), clusters).unwrap();
        for (a, v) in acc.iter_mut().zip(d.values()) {
            *a += v / draws as f64;
        }
    }
    acc
}

#[test]
fn c07_single_tree_pin_prevents_lethal_contact() {
    let _guard = serial();
    let start = Instant::now();
    let seed = 707u64;
    let world = generate_world(&pin_world_spec(seed)).unwrap();
    // The course must actually offer tree shortcuts for the no-pin premise.
    let tree_cells = (0..world.size() * world.size())
        .filter(|i| {
            world.class_at_cell(i % world.size(), i / world.size()) == TerrainClass::Tree
        })
        .count();
    assert!(tree_cells > 10, "world has too few tree cells: {tree_cells}");

    let clusters = fit_clusters(&sample_embeddings(&world, 1500, seed), 24, seed).unwrap();
    let params = RoughnessParams::default_accel_z();

    let mut config = RunConfig::default();
    config.seed = seed;
    config.laps = 5;
    config.sim.snapshot_every_ticks = 500;

    // Without the pin: the vehicle only learns about trees by hitting them.
    let out_dir = tempfile::tempdir().unwrap();
    let no_pin_dir = out_dir.path().join("no_pin");
    let no_pin = run_episode(&world, &clusters, &params, &config, Some(&no_pin_dir)).unwrap();
    let no_pin_hits: u64 = no_pin.laps.iter().map(|l| l.interactions).sum();
    assert!(no_pin_hits >= 1, "without the pin the run never touched a lethal cell");

    // With one pinned tree descriptor at maximal roughness.
    let pin = expected_descriptor(&world, &clusters, TerrainClass::Tree, seed);
    config.pins.push(travmap::config::PinSpec {
        roughness: 1.0,
        speeds: vec![1.0, 3.0, 5.0],
        descriptor: Some(pin),
        snapshot_cell: None,
    });
    let pin_dir = out_dir.path().join("with_pin");
    let pinned = run_episode(&world, &clusters, &params, &config, Some(&pin_dir)).unwrap();
    assert!(pinned.aborted.is_none(), "aborted: {:?}", pinned.aborted);
    let pinned_hits: u64 = pinned.laps.iter().map(|l| l.interactions).sum();
    assert_eq!(pinned_hits, 0, "pinned run touched lethal cells");

    // Rasterized cost on observed tree cells is lethal-grade in the last
    // snapshot of the pinned run.
    let snaps: Vec<_> = std::fs::read_dir(pin_dir.join("snapshots"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    let last = snaps.iter().max().unwrap();
    let (grid, _) = BevGrid::load(&last.join("meta.json")).unwrap();
    let mut tree_checked = 0;
    let mut min_cost = f64::INFINITY;
    for (ix, iy) in grid.known_cells() {
        let (wx, wy) = grid.cell_center(ix, iy);
        if world.class_at(wx, wy) == Some(TerrainClass::Tree) && grid.weight_at(ix, iy) >= 2.0 {
            tree_checked += 1;
            min_cost = min_cost.min(grid.cost_at(ix, iy));
        }
    }
    assert!(tree_checked >= 5, "too few observed tree cells: {tree_checked}");
    assert!(min_cost >= 0.9, "tree cell cost {min_cost} below 0.9");

    let elapsed = start.elapsed();
    assert_runtime(7, elapsed, Duration::from_secs(600));
    println!(
        "ACCEPTANCE 7 PASS: no-pin run {no_pin_hits} lethal ticks, pinned run 0 over 5 laps, \
         {tree_checked} tree cells all at cost >= {min_cost:.3}, in {elapsed:?}"
    );
}

// --- 8. OOD masking -------------------------------------------------------------

#[test]
fn c08_foreign_patch_masked_and_opening_cleans_noise() {
    let _guard = serial();
    let start = Instant::now();
    let seed = 808u64;
    let world = generate_world(&pin_world_spec(seed)).unwrap();
    let clusters = fit_clusters(&sample_embeddings(&world, 1500, seed), 24, seed).unwrap();
    let params = RoughnessParams::default_accel_z();
    let mut config = RunConfig::default();
    config.seed = seed;
    config.laps = 1;
    config.sim.snapshot_every_ticks = 0;

    // Drive one lap past the foreign patch, keeping the final pipeline state.
    let outcome = run_episode(&world, &clusters, &params, &config, None).unwrap();
    assert!(outcome.aborted.is_none(), "aborted: {:?}", outcome.aborted);

    // Rebuild the final map by replaying the log (same state by construction).
    let replayed = {
        use travmap::sim::LogRecord;
        let ticks: Vec<_> = outcome
            .records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Tick(t) => Some(t.clone()),
                _ => None,
            })
            .collect();
        let first = &ticks[0];
        let pose0 =
            VehicleState { x: first.x, y: first.y, heading: first.heading, speed: first.speed };
        let mut pipeline =
            travmap::sim::Pipeline::new(&config, clusters.clone(), &pose0, seed).unwrap();
        for record in &ticks {
            let pose = VehicleState {
                x: record.x,
                y: record.y,
                heading: record.heading,
                speed: record.speed,
            };
            pipeline
                .tick(record.tick, record.t, &pose, record.measured_roughness, &world)
                .unwrap();
        }
        pipeline
    };
    let grid = &replayed.grid;

    // Interior foreign cells (fully surrounded by the patch) that were
    // observed must be flagged lethal in the rasterized layers.
    let res = world.spec().resolution;
    let mut interior_checked = 0;
    for (ix, iy) in grid.known_cells() {
        let (wx, wy) = grid.cell_center(ix, iy);
        if world.class_at(wx, wy) != Some(TerrainClass::Foreign) {
            continue;
        }
        let interior = (-1..=1).all(|dy| {
            (-1..=1).all(|dx| {
                world.class_at(wx + dx as f64 * res, wy + dy as f64 * res)
                    == Some(TerrainClass::Foreign)
            })
        });
        if !interior {
            continue;
        }
        interior_checked += 1;
        assert!(grid.ood_at(ix, iy), "interior foreign cell ({ix},{iy}) not flagged");
        assert_eq!(grid.cost_at(ix, iy), 1.0);
        assert_eq!(grid.speed_limit_at(ix, iy), 0.0);
    }
    assert!(interior_checked >= 4, "patch interior barely observed: {interior_checked}");

    // Inject isolated false flags at a 1% rate into the raw mask; opening
    // must remove all of them and keep the patch bit-exact.
    let raw = grid.ood_mask(&clusters);
    let opened_clean = morphological_open(&raw, 1);
    let mut injected = raw.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut injected_cells = Vec::new();
    let isolated = |m: &Mask, ix: i64, iy: i64| {
        (-2..=2).all(|dy| {
            (-2..=2).all(|dx| {
                let (nx, ny) = (ix + dx, iy + dy);
                nx < 0
                    || ny < 0
                    || nx as usize >= m.width
                    || ny as usize >= m.height
                    || !m.get(nx as usize, ny as usize)
            })
        })
    };
    let target = grid.width() * grid.height() / 100;
    let mut guard = 0;
    while injected_cells.len() < target && guard < 100_000 {
        guard += 1;
        let ix = rng.gen_range(0..grid.width()) as i64;
        let iy = rng.gen_range(0..grid.height()) as i64;
        if isolated(&injected, ix, iy) {
            injected.set(ix as usize, iy as usize, true);
            injected_cells.push((ix as usize, iy as usize));
        }
    }
    assert!(injected_cells.len() >= target, "could not place isolated flags");
    let opened = morphological_open(&injected, 1);
    for &(ix, iy) in &injected_cells {
        assert!(!opened.get(ix, iy), "injected flag at ({ix},{iy}) survived opening");
    }
    assert_eq!(opened, opened_clean, "opening altered cells beyond the injected flags");

    let elapsed = start.elapsed();
    assert_runtime(8, elapsed, Duration::from_secs(60));
    println!(
        "ACCEPTANCE 8 PASS: {interior_checked} interior foreign cells lethal, {} injected \
         flags all removed, patch preserved exactly, in {elapsed:?}",
        injected_cells.len()
    );
}

// --- 9. Adaptive alpha_s ----------------------------------------------------------

#[test]
fn c09_alpha_s_adapts_in_both_directions() {
    let _guard = serial();
    let start = Instant::now();
    let risk_config = travmap::config::RiskConfig::default();

    // Over-budget terrain: alpha_s must hit its floor within 20 steps from
    // the most aggressive setting.
    let mut state = RiskState::from_config(&risk_config);
    state.alpha_s = state.alpha_max;
    let mut steps_down = None;
    for step in 1..=20 {
        state.update_alpha_s(2.0, 2.0, state.r_max + 0.1);
        if state.alpha_s <= state.alpha_min {
            steps_down = Some(step);
            break;
        }
    }
    let steps_down = steps_down.expect("alpha_s never reached its floor in 20 steps");

    // Smooth terrain whose roughness at the hard cap stays under budget:
    // the commanded limit ratchets up monotonically to its plateau.
    let world = corridor_world(909, 0.0); // all smooth grass
    let clusters = fit_clusters(&sample_embeddings(&world, 1000, 909), 16, 909).unwrap();
    let s_hard_max = 6.0;
    let r_max = 0.3;
    let margin = risk_config.roughness_margin;
    assert!(
        world.true_roughness(TerrainClass::SmoothGrass, s_hard_max) < r_max - margin,
        "premise: terrain must stay under budget at the hard cap"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let params = RoughnessParams::default_accel_z();
    let mut samples = Vec::new();
    for i in 0..120 {
        let speed = 0.5 + 5.5 * ((i * 17) % 61) as f64 / 60.0;
        let true_r = world.true_roughness(TerrainClass::SmoothGrass, speed);
        let window = synthesize_proprio(true_r, &params, 1.0, 100.0, &mut rng).unwrap();
        let noise = rand_distr::Normal::new(0.0, world.spec().embedding_noise_std).unwrap();
        let values: Vec<f64> = world
            .class_mean(TerrainClass::SmoothGrass)
            .iter()
            .map(|m| m + noise.sample(&mut rng))
            .collect();
        samples.push(ExperienceSample {
            descriptor: vlad_descriptor(&Embedding::new(values).unwrap(), &clusters).unwrap(),
            speed,
            roughness: roughness(&window, &params).unwrap(),
            timestamp: i as f64 * 0.1,
            pinned: false,
        });
    }
    let speed_model = fit_speed_model(&samples, GprHyperparams::default()).unwrap();
    let desc = samples[0].descriptor.clone();

    let mut state = RiskState::from_config(&risk_config);
    state.r_max = r_max;
    let plateau = speed_model.speed_limit(&desc, r_max, state.alpha_max, s_hard_max).unwrap();
    let mut limits = Vec::new();
    for _ in 0..200 {
        let limit = speed_model.speed_limit(&desc, r_max, state.alpha_s, s_hard_max).unwrap();
        limits.push(limit);
        // Vehicle tracks the limit; measured roughness follows the terrain.
        let measured_speed = limit;
        let measured_r = world.true_roughness(TerrainClass::SmoothGrass, measured_speed);
        state.update_alpha_s(measured_speed, limit, measured_r);
    }
    let speed_margin = risk_config.speed_margin;
    for w in limits.windows(2) {
        assert!(
            w[1] >= w[0] - 1e-12 || w[0] >= plateau - speed_margin,
            "limit decreased before reaching the plateau: {} -> {}",
            w[0],
            w[1]
        );
    }
    let last = *limits.last().unwrap();
    assert!(
        last >= plateau - speed_margin,
        "final limit {last} not within {speed_margin} of plateau {plateau}"
    );
    assert!(limits.windows(2).filter(|w| w[1] > w[0]).count() > 10, "limit never ratcheted up");

    let elapsed = start.elapsed();
    assert_runtime(9, elapsed, Duration::from_secs(60));
    println!(
        "ACCEPTANCE 9 PASS: alpha_s floored in {steps_down} steps on rough terrain; \
         limit ratcheted {:.2} -> {:.2} m/s (plateau {plateau:.2}), in {elapsed:?}",
        limits[0], last
    );
}

// --- 10. Determinism ---------------------------------------------------------------

fn dir_digest(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut entries = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                entries.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    entries
}

#[test]
fn c10_simulate_is_byte_deterministic() {
    let _guard = serial();
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("run.toml");
    std::fs::write(
        &config_path,
        "seed = 1010\nlaps = 1\ncluster_k = 16\ncluster_samples = 800\n\n\
         [sim]\nsnapshot_every_ticks = 200\n",
    )
    .unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    travmap_cli::simulate(&config_path, None, &out_a).unwrap();
    travmap_cli::simulate(&config_path, None, &out_b).unwrap();

    let a = dir_digest(&out_a);
    let b = dir_digest(&out_b);
    assert_eq!(a.len(), b.len());
    let mut files = 0;
    for ((name_a, bytes_a), (name_b, bytes_b)) in a.iter().zip(&b) {
        assert_eq!(name_a, name_b);
        assert!(bytes_a == bytes_b, "{name_a} differs between runs");
        files += 1;
    }
    let elapsed = start.elapsed();
    println!(
        "ACCEPTANCE 10 PASS: two simulate runs byte-identical across {files} files \
         (log, metrics, snapshots), in {elapsed:?}"
    );
}

// --- 11. Performance budget -----------------------------------------------------------

#[test]
fn c11_refit_rasterize_and_mppi_meet_the_loop_budget() {
    let _guard = serial();
    let k = 32usize;
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    // Cluster-structured descriptors, as fused map cells are: six terrain
    // prototypes, four of them represented in the buffer.
    let protos: Vec<Vec<f64>> =
        (0..6).map(|_| (0..k).map(|_| rng.gen_range(0.0..8.0)).collect()).collect();
    let mut descriptor = |class: usize, rng: &mut ChaCha8Rng| -> FeatureDescriptor {
        FeatureDescriptor::new(
            protos[class].iter().map(|v| (v + rng.gen_range(-0.1..0.1)).max(0.0)).collect(),
        )
        .unwrap()
    };

    let mut grid = BevGrid::new(GridConfig {
        resolution: 0.5,
        width: 120,
        height: 120,
        origin: (0.0, 0.0),
        k,
        weight_cap: 100.0,
        initial_cost: 0.5,
        initial_speed: 6.0,
    })
    .unwrap();
    let observations: Vec<CellObservation> = (0..120 * 120)
        .map(|i| CellObservation {
            ix: (i % 120) as i64,
            iy: (i / 120) as i64,
            descriptor: descriptor(((i % 120) / 20 + (i / 120) / 20) % 6, &mut rng),
        })
        .collect();
    grid.integrate(&observations, 1.0).unwrap();

    let samples: Vec<ExperienceSample> = (0..512)
        .map(|i| ExperienceSample {
            descriptor: descriptor(i % 4, &mut rng),
            speed: rng.gen_range(0.5..6.0),
            roughness: rng.gen_range(0.0..0.6),
            timestamp: i as f64,
            pinned: false,
        })
        .collect();
    let hyper = GprHyperparams::default();
    let risk = RiskState::from_config(&travmap::config::RiskConfig::default());

    // Warm-up round (allocator, thread pool), then best of three measured.
    let mut best = Duration::MAX;
    for round in 0..4 {
        let t0 = Instant::now();
        let (cost_model, speed_model) = rayon::join(
            || fit_cost_model(&samples, hyper, 6.0).unwrap(),
            || fit_speed_model(&samples, hyper).unwrap(),
        );
        rasterize(&mut grid, &cost_model, &speed_model, &risk, 2.0, 6.0).unwrap();
        let elapsed = t0.elapsed();
        if round > 0 {
            best = best.min(elapsed);
        }
    }
    assert!(
        best < Duration::from_millis(250),
        "refit + 120x120 rasterization took {best:?} (budget 250 ms)"
    );

    let params = MppiParams::from_config(
        &travmap::config::PlannerConfig::default(),
        &travmap::config::VehicleConfig::default(),
        6.0,
    );
    assert_eq!((params.rollouts, params.horizon), (512, 40));
    let state = VehicleState { x: 30.0, y: 30.0, heading: 0.3, speed: 2.0 };
    let mut best_mppi = Duration::MAX;
    for round in 0..4 {
        let t0 = Instant::now();
        let plan = mppi_plan(&state, 0.0, &grid, (55.0, 50.0), &[], &params, round).unwrap();
        let elapsed = t0.elapsed();
        assert!(plan.min_cost.is_finite());
        if round > 0 {
            best_mppi = best_mppi.min(elapsed);
        }
    }
    assert!(
        best_mppi < Duration::from_millis(50),
        "one MPPI cycle took {best_mppi:?} (budget 50 ms)"
    );

    println!(
        "ACCEPTANCE 11 PASS: full refit + 120x120 rasterization {best:?} (< 250 ms), \
         MPPI cycle M=512 H=40 {best_mppi:?} (< 50 ms)"
    );
}
