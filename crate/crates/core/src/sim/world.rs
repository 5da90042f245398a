//! Terrain layout, latent embeddings, sensing, and proprioception synthesis.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bev::{BevGrid, CellObservation};
use crate::error::{Error, Result};
use crate::feature_space::{vlad_descriptor, ClusterSet, Embedding};
use crate::planner::VehicleState;
use crate::proprio::{ProprioWindow, RoughnessParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerrainClass {
    Trail,
    SmoothGrass,
    RoughGrass,
    Gravel,
    Tree,
    Foreign,
}

pub const ALL_CLASSES: [TerrainClass; 6] = [
    TerrainClass::Trail,
    TerrainClass::SmoothGrass,
    TerrainClass::RoughGrass,
    TerrainClass::Gravel,
    TerrainClass::Tree,
    TerrainClass::Foreign,
];

impl TerrainClass {
    pub fn index(self) -> usize {
        ALL_CLASSES.iter().position(|c| *c == self).expect("class listed")
    }
}

/// Ground-truth roughness curve g(class, speed) = clamp(r0 + r1 * speed, 0, 1)
/// plus the lethal flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassParams {
    pub r0: f64,
    pub r1: f64,
    pub lethal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub seed: u64,
    /// Cells per side; the world is square.
    pub size: usize,
    /// Meters per cell.
    pub resolution: f64,
    /// Latent embedding dimension C.
    pub embedding_dim: usize,
    /// Per-entry Gaussian noise on sensed embeddings.
    pub embedding_noise_std: f64,
    /// Figure-eight course half-width along x, m.
    pub course_a: f64,
    /// Figure-eight course y scale, m.
    pub course_b: f64,
    pub trail_halfwidth: f64,
    pub waypoint_spacing: f64,
    /// Random vegetation patches per non-trail class.
    pub patch_count: usize,
    pub patch_radius: f64,
    /// Extra tree clusters beyond the shortcut-blocking ones.
    pub tree_clusters: usize,
    pub tree_radius: f64,
    /// Place tree clusters on straight lines between waypoints.
    pub trees_block_shortcuts: bool,
    /// Side length of the solid foreign-object patch, cells.
    pub foreign_patch_cells: usize,
    pub classes: ClassTable,
}

/// Roughness curves and lethality per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassTable {
    pub trail: ClassParams,
    pub smooth_grass: ClassParams,
    pub rough_grass: ClassParams,
    pub gravel: ClassParams,
    pub tree: ClassParams,
    pub foreign: ClassParams,
}

impl Default for ClassTable {
    fn default() -> Self {
        ClassTable {
            trail: ClassParams { r0: 0.02, r1: 0.01, lethal: false },
            smooth_grass: ClassParams { r0: 0.05, r1: 0.02, lethal: false },
            rough_grass: ClassParams { r0: 0.15, r1: 0.06, lethal: false },
            gravel: ClassParams { r0: 0.10, r1: 0.04, lethal: false },
            tree: ClassParams { r0: 0.90, r1: 0.01, lethal: true },
            foreign: ClassParams { r0: 0.90, r1: 0.01, lethal: true },
        }
    }
}

impl ClassTable {
    pub fn get(&self, class: TerrainClass) -> ClassParams {
        match class {
            TerrainClass::Trail => self.trail,
            TerrainClass::SmoothGrass => self.smooth_grass,
            TerrainClass::RoughGrass => self.rough_grass,
            TerrainClass::Gravel => self.gravel,
            TerrainClass::Tree => self.tree,
            TerrainClass::Foreign => self.foreign,
        }
    }
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            seed: 1,
            size: 160,
            resolution: 0.5,
            embedding_dim: 16,
            embedding_noise_std: 0.05,
            course_a: 30.0,
            course_b: 24.0,
            trail_halfwidth: 1.5,
            waypoint_spacing: 12.0,
            patch_count: 10,
            patch_radius: 4.0,
            tree_clusters: 4,
            tree_radius: 1.2,
            trees_block_shortcuts: true,
            foreign_patch_cells: 4,
            classes: ClassTable::default(),
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 || !(self.resolution > 0.0) {
            return Err(Error::invalid("world: size >= 16 and positive resolution required"));
        }
        if self.embedding_dim == 0 {
            return Err(Error::invalid("world: embedding_dim must be non-zero"));
        }
        if !(self.embedding_noise_std >= 0.0) {
            return Err(Error::invalid("world: noise std must be >= 0"));
        }
        if !(self.course_a > 0.0 && self.course_b > 0.0 && self.waypoint_spacing > 0.0) {
            return Err(Error::invalid("world: course scales and spacing must be positive"));
        }
        let extent = self.size as f64 * self.resolution;
        if 2.0 * self.course_a >= extent || self.course_b >= extent {
            return Err(Error::invalid("world: course does not fit inside the map"));
        }
        for class in ALL_CLASSES {
            let p = self.classes.get(class);
            if p.r0 < 0.0 || p.r1 < 0.0 {
                return Err(Error::invalid(
                    "world: roughness curves need r0, r1 >= 0 so roughness is monotone in speed",
                ));
            }
        }
        if !self.classes.get(TerrainClass::Tree).lethal
            || !self.classes.get(TerrainClass::Foreign).lethal
        {
            return Err(Error::invalid("world: tree and foreign classes must be lethal"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
        let spec: WorldSpec =
            toml::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::format(format!("serialize world spec: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct World {
    spec: WorldSpec,
    /// Row-major class indices.
    cells: Vec<u8>,
    /// Latent embedding mean per class.
    class_means: Vec<Vec<f64>>,
    /// Closed course waypoints, world meters.
    waypoints: Vec<(f64, f64)>,
}

impl World {
    /// Assembles a custom scenario world from explicit parts: a row-major
    /// class layout, per-class latent means (one per [`ALL_CLASSES`] entry,
    /// each of the spec's embedding dimension), and course waypoints.
    pub fn from_parts(
        spec: WorldSpec,
        cells: Vec<TerrainClass>,
        class_means: Vec<Vec<f64>>,
        waypoints: Vec<(f64, f64)>,
    ) -> Result<Self> {
        spec.validate()?;
        if cells.len() != spec.size * spec.size {
            return Err(Error::invalid("cell layout does not match the spec size"));
        }
        if class_means.len() != ALL_CLASSES.len()
            || class_means.iter().any(|m| m.len() != spec.embedding_dim)
        {
            return Err(Error::invalid("need one latent mean of dim C per terrain class"));
        }
        if waypoints.len() < 2 {
            return Err(Error::invalid("need at least 2 waypoints"));
        }
        let extent = spec.size as f64 * spec.resolution;
        if waypoints.iter().any(|(x, y)| !(0.0..extent).contains(x) || !(0.0..extent).contains(y)) {
            return Err(Error::invalid("waypoints must lie inside the world"));
        }
        let cells = cells.into_iter().map(|c| c.index() as u8).collect();
        Ok(World { spec, cells, class_means, waypoints })
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn size(&self) -> usize {
        self.spec.size
    }

    pub fn extent(&self) -> f64 {
        self.spec.size as f64 * self.spec.resolution
    }

    pub fn waypoints(&self) -> &[(f64, f64)] {
        &self.waypoints
    }

    pub fn class_mean(&self, class: TerrainClass) -> &[f64] {
        &self.class_means[class.index()]
    }

    pub fn class_at_cell(&self, ix: usize, iy: usize) -> TerrainClass {
        ALL_CLASSES[self.cells[iy * self.spec.size + ix] as usize]
    }

    /// Class at a world point; None outside the map.
    pub fn class_at(&self, x: f64, y: f64) -> Option<TerrainClass> {
        let ix = (x / self.spec.resolution).floor();
        let iy = (y / self.spec.resolution).floor();
        if ix < 0.0 || iy < 0.0 || ix >= self.spec.size as f64 || iy >= self.spec.size as f64 {
            return None;
        }
        Some(self.class_at_cell(ix as usize, iy as usize))
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            (ix as f64 + 0.5) * self.spec.resolution,
            (iy as f64 + 0.5) * self.spec.resolution,
        )
    }

    /// Ground-truth roughness at a class and speed; monotone in speed.
    pub fn true_roughness(&self, class: TerrainClass, speed: f64) -> f64 {
        let p = self.spec.classes.get(class);
        (p.r0 + p.r1 * speed).clamp(0.0, 1.0)
    }

    pub fn is_lethal(&self, class: TerrainClass) -> bool {
        self.spec.classes.get(class).lethal
    }
}

/// Gerono lemniscate point at parameter t, centered in the world.
fn course_point(spec: &WorldSpec, t: f64) -> (f64, f64) {
    let c = spec.size as f64 * spec.resolution / 2.0;
    (c + spec.course_a * t.sin(), c + spec.course_b * t.sin() * t.cos())
}

/// Deterministic layout: a figure-eight trail through mixed vegetation with
/// tree clusters and one solid foreign-object patch beside the trail.
pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let size = spec.size;
    let res = spec.resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Latent class means: entries U(0, 1); the foreign class is shifted far
    // outside the span of the others so it lands beyond any data-driven
    // OOD threshold.
    let mut class_means = Vec::with_capacity(ALL_CLASSES.len());
    for class in ALL_CLASSES {
        let offset = if class == TerrainClass::Foreign { 4.0 } else { 0.0 };
        let mean: Vec<f64> =
            (0..spec.embedding_dim).map(|_| rng.gen::<f64>() + offset).collect();
        class_means.push(mean);
    }

    let mut cells = vec![TerrainClass::SmoothGrass.index() as u8; size * size];
    let splat = |cells: &mut Vec<u8>, cx: f64, cy: f64, radius: f64, class: TerrainClass| {
        let r_cells = (radius / res).ceil() as i64;
        let (icx, icy) = ((cx / res) as i64, (cy / res) as i64);
        for iy in (icy - r_cells).max(0)..=(icy + r_cells).min(size as i64 - 1) {
            for ix in (icx - r_cells).max(0)..=(icx + r_cells).min(size as i64 - 1) {
                let (wx, wy) = ((ix as f64 + 0.5) * res, (iy as f64 + 0.5) * res);
                if (wx - cx).powi(2) + (wy - cy).powi(2) <= radius * radius {
                    cells[iy as usize * size + ix as usize] = class.index() as u8;
                }
            }
        }
    };

    // Vegetation patches.
    let extent = size as f64 * res;
    for class in [TerrainClass::RoughGrass, TerrainClass::Gravel] {
        for _ in 0..spec.patch_count {
            let cx = rng.gen::<f64>() * extent;
            let cy = rng.gen::<f64>() * extent;
            let radius = spec.patch_radius * (0.5 + rng.gen::<f64>());
            splat(&mut cells, cx, cy, radius, class);
        }
    }

    // Course polyline and waypoints.
    let samples = 2048;
    let path: Vec<(f64, f64)> = (0..samples)
        .map(|i| course_point(spec, i as f64 / samples as f64 * std::f64::consts::TAU))
        .collect();
    let mut waypoints = vec![path[0]];
    let mut acc = 0.0;
    for w in path.windows(2) {
        acc += ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt();
        if acc >= spec.waypoint_spacing {
            waypoints.push(w[1]);
            acc = 0.0;
        }
    }
    if waypoints.len() < 3 {
        return Err(Error::invalid("world: waypoint spacing leaves fewer than 3 waypoints"));
    }

    let dist_to_path = |x: f64, y: f64| -> f64 {
        path.iter()
            .map(|(px, py)| ((px - x).powi(2) + (py - y).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    };

    // Trail carved last over vegetation so the course is always drivable.
    for iy in 0..size {
        for ix in 0..size {
            let (wx, wy) = ((ix as f64 + 0.5) * res, (iy as f64 + 0.5) * res);
            if dist_to_path(wx, wy) <= spec.trail_halfwidth {
                cells[iy * size + ix] = TerrainClass::Trail.index() as u8;
            }
        }
    }

    // Tree clusters that block straight-line shortcuts between waypoints.
    if spec.trees_block_shortcuts {
        for i in 0..waypoints.len() {
            let a = waypoints[i];
            let b = waypoints[(i + 1) % waypoints.len()];
            let mid = ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0);
            if dist_to_path(mid.0, mid.1) > spec.trail_halfwidth + spec.tree_radius + 1.0 {
                splat(&mut cells, mid.0, mid.1, spec.tree_radius, TerrainClass::Tree);
            }
        }
    }
    for _ in 0..spec.tree_clusters {
        let cx = rng.gen::<f64>() * extent;
        let cy = rng.gen::<f64>() * extent;
        if dist_to_path(cx, cy) > spec.trail_halfwidth + spec.tree_radius + 1.0 {
            splat(&mut cells, cx, cy, spec.tree_radius, TerrainClass::Tree);
        }
    }

    // Solid square foreign patch beside the trail (solid so opening with
    // radius 1 preserves it).
    let anchor = course_point(spec, 0.3 * std::f64::consts::TAU);
    let after = course_point(spec, 0.3 * std::f64::consts::TAU + 0.01);
    let tangent = ((after.0 - anchor.0), (after.1 - anchor.1));
    let norm = (tangent.0.powi(2) + tangent.1.powi(2)).sqrt();
    let normal = (-tangent.1 / norm, tangent.0 / norm);
    let offset = spec.trail_halfwidth + 1.5;
    let corner = (anchor.0 + normal.0 * offset, anchor.1 + normal.1 * offset);
    let (fx, fy) = ((corner.0 / res) as i64, (corner.1 / res) as i64);
    for dy in 0..spec.foreign_patch_cells as i64 {
        for dx in 0..spec.foreign_patch_cells as i64 {
            let (ix, iy) = (fx + dx, fy + dy);
            if ix >= 0 && iy >= 0 && (ix as usize) < size && (iy as usize) < size {
                cells[iy as usize * size + ix as usize] = TerrainClass::Foreign.index() as u8;
            }
        }
    }

    Ok(World { spec: spec.clone(), cells, class_means, waypoints })
}

/// Draws noisy embeddings from non-foreign cells, for cluster fitting. The
/// foreign class is excluded by construction: it models terrain the feature
/// space has never seen.
pub fn sample_embeddings(world: &World, count: usize, seed: u64) -> Vec<Embedding> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, world.spec.embedding_noise_std.max(f64::MIN_POSITIVE))
        .expect("valid std");
    let size = world.spec.size;
    let mut samples = Vec::with_capacity(count);
    while samples.len() < count {
        let ix = rng.gen_range(0..size);
        let iy = rng.gen_range(0..size);
        let class = world.class_at_cell(ix, iy);
        if class == TerrainClass::Foreign {
            continue;
        }
        let mean = world.class_mean(class);
        let values: Vec<f64> = mean.iter().map(|m| m + noise.sample(&mut rng)).collect();
        samples.push(Embedding::new(values).expect("finite embedding"));
    }
    samples
}

/// True when a tree cell sits strictly between the robot cell and the
/// target cell along the grid line between them.
fn occluded(world: &World, from: (usize, usize), to: (usize, usize)) -> bool {
    let (mut x0, mut y0) = (from.0 as i64, from.1 as i64);
    let (x1, y1) = (to.0 as i64, to.1 as i64);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if (x0, y0) != (from.0 as i64, from.1 as i64) && (x0, y0) != (x1, y1) {
            if world.class_at_cell(x0 as usize, y0 as usize) == TerrainClass::Tree {
                return true;
            }
        }
        if x0 == x1 && y0 == y1 {
            return false;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// Senses world cells in a forward sector (range `fov`, given half-angle):
/// per visible cell, a VLAD descriptor of the class latent plus Gaussian
/// noise, addressed at the grid's cell indices. Tree cells occlude cells
/// behind them but are visible themselves.
pub fn sense(
    world: &World,
    pose: &VehicleState,
    fov: f64,
    half_angle: f64,
    clusters: &ClusterSet,
    grid: &BevGrid,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<CellObservation>> {
    let res = world.spec.resolution;
    let size = world.spec.size as i64;
    let noise = Normal::new(0.0, world.spec.embedding_noise_std.max(f64::MIN_POSITIVE))
        .expect("valid std");
    let robot_cell = (
        ((pose.x / res).floor() as i64).clamp(0, size - 1) as usize,
        ((pose.y / res).floor() as i64).clamp(0, size - 1) as usize,
    );
    let r_cells = (fov / res).ceil() as i64;
    let (icx, icy) = ((pose.x / res).floor() as i64, (pose.y / res).floor() as i64);

    let mut observations = Vec::new();
    for iy in (icy - r_cells).max(0)..=(icy + r_cells).min(size - 1) {
        for ix in (icx - r_cells).max(0)..=(icx + r_cells).min(size - 1) {
            let (wx, wy) = world.cell_center(ix as usize, iy as usize);
            let (dx, dy) = (wx - pose.x, wy - pose.y);
            let range = (dx * dx + dy * dy).sqrt();
            if range > fov {
                continue;
            }
            let bearing = dy.atan2(dx) - pose.heading;
            let bearing = (bearing + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU)
                - std::f64::consts::PI;
            if bearing.abs() > half_angle {
                continue;
            }
            if occluded(world, robot_cell, (ix as usize, iy as usize)) {
                continue;
            }
            let class = world.class_at_cell(ix as usize, iy as usize);
            let mean = world.class_mean(class);
            let values: Vec<f64> = mean.iter().map(|m| m + noise.sample(rng)).collect();
            let embedding = Embedding::new(values).expect("finite embedding");
            let descriptor = vlad_descriptor(&embedding, clusters)?;
            let (gx, gy) = grid.world_to_cell_signed(wx, wy);
            observations.push(CellObservation { ix: gx, iy: gy, descriptor });
        }
    }
    Ok(observations)
}

/// Random-phase multisine with Rayleigh amplitudes inside each configured
/// band, scaled so the expected roughness equals `r_true`. The in-band power
/// split across active channels is solved from the weights analytically.
pub fn synthesize_proprio(
    r_true: f64,
    params: &RoughnessParams,
    duration_s: f64,
    fs: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ProprioWindow> {
    if !(0.0..=1.0).contains(&r_true) {
        return Err(Error::invalid("r_true must lie in [0, 1]"));
    }
    let n = (duration_s * fs).round() as usize;
    if n < 16 {
        return Err(Error::invalid("duration * fs must be at least 16"));
    }
    params.validate(fs)?;
    let max_window = params.channels.iter().fold(0.0f64, |m, b| m.max(b.window_s));
    if duration_s + 1e-9 < max_window {
        return Err(Error::invalid(format!(
            "duration {duration_s}s shorter than the largest configured window {max_window}s"
        )));
    }

    let active: Vec<usize> = params
        .channels
        .iter()
        .enumerate()
        .filter(|(_, b)| b.weight > 0.0)
        .map(|(i, _)| i)
        .collect();

    let mut channels = Vec::with_capacity(params.channels.len());
    for (i, band) in params.channels.iter().enumerate() {
        let mut data = vec![0.0f64; n];
        let is_active = active.contains(&i);
        if r_true > 0.0 && is_active {
            // Power so that sum_i w_i * P_i = r_true, split evenly over
            // active channels.
            let power = r_true / (active.len() as f64 * band.weight);
            // Tones sit clear of the band edges so the shortest analysis
            // window still captures them.
            let margin = 2.0 / band.window_s.min(duration_s);
            let bandwidth = band.f_max - band.f_min;
            let (lo, hi, tones) = if bandwidth > 2.5 * margin {
                (band.f_min + margin, band.f_max - margin, 8usize)
            } else {
                let center = 0.5 * (band.f_min + band.f_max);
                (center, center, 1usize)
            };
            for j in 0..tones {
                let f = if tones == 1 {
                    lo
                } else {
                    lo + (hi - lo) * j as f64 / (tones - 1) as f64
                };
                // Rayleigh amplitude: E[a^2] = 2 * power / tones.
                let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
                let a = (2.0 * power / tones as f64).sqrt() * (-u.ln()).sqrt();
                let phase = rng.gen::<f64>() * std::f64::consts::TAU;
                for (t, sample) in data.iter_mut().enumerate() {
                    *sample += a * (std::f64::consts::TAU * f * t as f64 / fs + phase).sin();
                }
            }
        }
        channels.push((band.channel, data));
    }
    ProprioWindow::new(fs, channels)
}
