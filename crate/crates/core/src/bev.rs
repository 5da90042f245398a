//! Robot-centered bird's-eye-view grid.
//!
//! Cells fuse descriptor observations with an exponential moving average,
//! scroll in whole-cell increments as the robot moves, and carry rasterized
//! cost/speed layers plus a morphologically cleaned OOD mask.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_space::{ClusterSet, FeatureDescriptor};

/// Grid geometry and defaults for a fresh map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    /// Meters per cell.
    pub resolution: f64,
    pub width: usize,
    pub height: usize,
    /// World coordinates of the lower-left corner of cell (0, 0).
    pub origin: (f64, f64),
    /// Descriptor dimension `k`.
    pub k: usize,
    /// Observation-count cap per cell.
    pub weight_cap: f64,
    /// Cost assigned to cells that have never been rasterized.
    pub initial_cost: f64,
    /// Speed limit assigned to cells that have never been rasterized.
    pub initial_speed: f64,
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0) {
            return Err(Error::invalid("grid resolution must be positive"));
        }
        if self.width == 0 || self.height == 0 || self.k == 0 {
            return Err(Error::invalid("grid dimensions and k must be non-zero"));
        }
        if !(self.weight_cap >= 1.0) {
            return Err(Error::invalid("weight cap must be at least 1"));
        }
        Ok(())
    }
}

/// One fused-descriptor observation aimed at a grid cell. Indices are signed
/// so sensors may report cells that fall outside the current window.
#[derive(Debug, Clone, PartialEq)]
pub struct CellObservation {
    pub ix: i64,
    pub iy: i64,
    pub descriptor: FeatureDescriptor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    config: GridConfig,
    /// Row-major `height x width x k` descriptors; meaningful where weight > 0.
    desc: Vec<f64>,
    weight: Vec<f64>,
    ood: Vec<bool>,
    cost: Vec<f64>,
    speed_limit: Vec<f64>,
    /// Observations dropped for falling outside the grid; sensor edge
    /// effects are expected, not fatal.
    oob_skipped: u64,
}

impl BevGrid {
    pub fn new(config: GridConfig) -> Result<Self> {
        config.validate()?;
        let cells = config.width * config.height;
        Ok(BevGrid {
            desc: vec![0.0; cells * config.k],
            weight: vec![0.0; cells],
            ood: vec![false; cells],
            cost: vec![config.initial_cost; cells],
            speed_limit: vec![config.initial_speed; cells],
            oob_skipped: 0,
            config,
        })
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn height(&self) -> usize {
        self.config.height
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    pub fn origin(&self) -> (f64, f64) {
        self.config.origin
    }

    pub fn oob_skipped(&self) -> u64 {
        self.oob_skipped
    }

    fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.config.width + ix
    }

    pub fn in_bounds(&self, ix: i64, iy: i64) -> bool {
        ix >= 0 && iy >= 0 && (ix as usize) < self.config.width && (iy as usize) < self.config.height
    }

    /// Grid cell containing the world point, if inside the window.
    pub fn world_to_cell(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let ix = ((x - self.config.origin.0) / self.config.resolution).floor() as i64;
        let iy = ((y - self.config.origin.1) / self.config.resolution).floor() as i64;
        self.in_bounds(ix, iy).then_some((ix as usize, iy as usize))
    }

    /// Signed cell coordinates of the world point, in or out of bounds.
    pub fn world_to_cell_signed(&self, x: f64, y: f64) -> (i64, i64) {
        (
            ((x - self.config.origin.0) / self.config.resolution).floor() as i64,
            ((y - self.config.origin.1) / self.config.resolution).floor() as i64,
        )
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.config.origin.0 + (ix as f64 + 0.5) * self.config.resolution,
            self.config.origin.1 + (iy as f64 + 0.5) * self.config.resolution,
        )
    }

    /// Cells with at least one fused observation.
    pub fn is_known(&self, ix: usize, iy: usize) -> bool {
        self.weight[self.index(ix, iy)] > 0.0
    }

    pub fn descriptor(&self, ix: usize, iy: usize) -> Option<&[f64]> {
        let idx = self.index(ix, iy);
        (self.weight[idx] > 0.0).then(|| &self.desc[idx * self.config.k..(idx + 1) * self.config.k])
    }

    pub fn weight_at(&self, ix: usize, iy: usize) -> f64 {
        self.weight[self.index(ix, iy)]
    }

    pub fn ood_at(&self, ix: usize, iy: usize) -> bool {
        self.ood[self.index(ix, iy)]
    }

    pub fn cost_at(&self, ix: usize, iy: usize) -> f64 {
        self.cost[self.index(ix, iy)]
    }

    pub fn speed_limit_at(&self, ix: usize, iy: usize) -> f64 {
        self.speed_limit[self.index(ix, iy)]
    }

    pub fn set_cost(&mut self, ix: usize, iy: usize, cost: f64) {
        let idx = self.index(ix, iy);
        self.cost[idx] = cost;
    }

    pub fn set_speed_limit(&mut self, ix: usize, iy: usize, v: f64) {
        let idx = self.index(ix, iy);
        self.speed_limit[idx] = v;
    }

    pub fn set_ood(&mut self, ix: usize, iy: usize, flag: bool) {
        let idx = self.index(ix, iy);
        self.ood[idx] = flag;
    }

    /// Immutable copy for concurrent readers.
    pub fn snapshot(&self) -> BevGrid {
        self.clone()
    }

    /// Fuses observations: first write copies the descriptor, later writes
    /// blend `(1 - beta) * old + beta * new`. Out-of-bounds observations are
    /// skipped and tallied.
    pub fn integrate(&mut self, observations: &[CellObservation], beta: f64) -> Result<()> {
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::invalid("beta must lie in (0, 1]"));
        }
        let k = self.config.k;
        for obs in observations {
            if obs.descriptor.len() != k {
                return Err(Error::invalid(format!(
                    "observation descriptor has {} entries, grid expects {k}",
                    obs.descriptor.len()
                )));
            }
            if !self.in_bounds(obs.ix, obs.iy) {
                self.oob_skipped += 1;
                continue;
            }
            let idx = self.index(obs.ix as usize, obs.iy as usize);
            let slot = &mut self.desc[idx * k..(idx + 1) * k];
            if self.weight[idx] == 0.0 {
                slot.copy_from_slice(obs.descriptor.values());
            } else {
                for (d, o) in slot.iter_mut().zip(obs.descriptor.values()) {
                    *d = (1.0 - beta) * *d + beta * o;
                }
            }
            self.weight[idx] = (self.weight[idx] + 1.0).min(self.config.weight_cap);
        }
        Ok(())
    }

    /// Scrolls the window so the robot sits inside the central 50% of the
    /// grid, moving the origin in whole-cell increments. Returns the applied
    /// (dx, dy) shift in cells. Retained cells keep their contents bit-exact;
    /// cells scrolled in start unknown.
    pub fn recenter(&mut self, robot_x: f64, robot_y: f64) -> Result<(i64, i64)> {
        if !robot_x.is_finite() || !robot_y.is_finite() {
            return Err(Error::invalid("robot pose must be finite"));
        }
        let (cx, cy) = self.world_to_cell_signed(robot_x, robot_y);
        let (w, h) = (self.config.width as i64, self.config.height as i64);
        let inside = |c: i64, extent: i64| c >= extent / 4 && c < extent - extent / 4;
        if inside(cx, w) && inside(cy, h) {
            return Ok((0, 0));
        }
        let dx = cx - w / 2;
        let dy = cy - h / 2;
        self.scroll(dx, dy);
        Ok((dx, dy))
    }

    /// Shifts the origin by (dx, dy) cells: content at (i, j) moves to
    /// (i - dx, j - dy).
    pub fn scroll(&mut self, dx: i64, dy: i64) {
        if dx == 0 && dy == 0 {
            return;
        }
        let (w, h, k) = (self.config.width, self.config.height, self.config.k);
        let mut desc = vec![0.0; w * h * k];
        let mut weight = vec![0.0; w * h];
        let mut ood = vec![false; w * h];
        let mut cost = vec![self.config.initial_cost; w * h];
        let mut speed = vec![self.config.initial_speed; w * h];
        for ny in 0..h as i64 {
            let sy = ny + dy;
            if sy < 0 || sy >= h as i64 {
                continue;
            }
            for nx in 0..w as i64 {
                let sx = nx + dx;
                if sx < 0 || sx >= w as i64 {
                    continue;
                }
                let src = sy as usize * w + sx as usize;
                let dst = ny as usize * w + nx as usize;
                desc[dst * k..(dst + 1) * k].copy_from_slice(&self.desc[src * k..(src + 1) * k]);
                weight[dst] = self.weight[src];
                ood[dst] = self.ood[src];
                cost[dst] = self.cost[src];
                speed[dst] = self.speed_limit[src];
            }
        }
        self.desc = desc;
        self.weight = weight;
        self.ood = ood;
        self.cost = cost;
        self.speed_limit = speed;
        self.config.origin.0 += dx as f64 * self.config.resolution;
        self.config.origin.1 += dy as f64 * self.config.resolution;
    }

    /// Raw OOD mask: known cells whose fused descriptor is beyond `tau` from
    /// every cluster; unknown cells are false.
    pub fn ood_mask(&self, clusters: &ClusterSet) -> Mask {
        let mut data = vec![false; self.config.width * self.config.height];
        let k = self.config.k;
        for idx in 0..data.len() {
            if self.weight[idx] > 0.0 {
                let d = &self.desc[idx * k..(idx + 1) * k];
                let min = d.iter().copied().fold(f64::INFINITY, f64::min);
                data[idx] = min > clusters.tau();
            }
        }
        Mask { width: self.config.width, height: self.config.height, data }
    }

    /// Computes the opened OOD mask and stores it in the grid's OOD layer.
    pub fn apply_ood(&mut self, clusters: &ClusterSet, open_radius: usize) {
        let opened = morphological_open(&self.ood_mask(clusters), open_radius);
        self.ood = opened.data;
    }

    /// Iterator over known cell indices in row-major order.
    pub fn known_cells(&self) -> Vec<(usize, usize)> {
        let mut cells = Vec::new();
        for iy in 0..self.config.height {
            for ix in 0..self.config.width {
                if self.weight[self.index(ix, iy)] > 0.0 {
                    cells.push((ix, iy));
                }
            }
        }
        cells
    }
}

/// Binary grid used by the morphology operators.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask { width, height, data: vec![false; width * height] }
    }

    pub fn get(&self, ix: usize, iy: usize) -> bool {
        self.data[iy * self.width + ix]
    }

    pub fn set(&mut self, ix: usize, iy: usize, v: bool) {
        self.data[iy * self.width + ix] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }
}

/// Erosion with a square structuring element of side `2 * radius + 1`;
/// cells beyond the border count as false.
pub fn erode(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let r = radius as i64;
    let mut out = Mask::new(mask.width, mask.height);
    for iy in 0..mask.height as i64 {
        'cell: for ix in 0..mask.width as i64 {
            for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (ix + dx, iy + dy);
                    let inside = nx >= 0
                        && ny >= 0
                        && (nx as usize) < mask.width
                        && (ny as usize) < mask.height;
                    if !inside || !mask.get(nx as usize, ny as usize) {
                        continue 'cell;
                    }
                }
            }
            out.set(ix as usize, iy as usize, true);
        }
    }
    out
}

/// Dilation with the same square structuring element.
pub fn dilate(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let r = radius as i64;
    let mut out = Mask::new(mask.width, mask.height);
    for iy in 0..mask.height as i64 {
        for ix in 0..mask.width as i64 {
            if !mask.get(ix as usize, iy as usize) {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (ix + dx, iy + dy);
                    if nx >= 0 && ny >= 0 && (nx as usize) < mask.width && (ny as usize) < mask.height
                    {
                        out.set(nx as usize, ny as usize, true);
                    }
                }
            }
        }
    }
    out
}

/// Opening: erosion followed by dilation. Removes isolated flags smaller
/// than the structuring element while preserving solid regions.
pub fn morphological_open(mask: &Mask, radius: usize) -> Mask {
    dilate(&erode(mask, radius), radius)
}

// --- Export / import -------------------------------------------------------

/// Snapshot sidecar: geometry plus the layer file names.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub grid: GridConfig,
    pub oob_skipped: u64,
    /// Estimator settings embedded so a snapshot plus its buffer checkpoint
    /// is enough to re-rasterize offline.
    pub estimator: Option<crate::config::EstimatorConfig>,
    pub layers: LayerFiles,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerFiles {
    pub cost: String,
    pub speed_limit: String,
    pub ood: String,
    pub weight: String,
    pub descriptor: String,
    pub buffer: Option<String>,
}

impl Default for LayerFiles {
    fn default() -> Self {
        LayerFiles {
            cost: "cost.csv".into(),
            speed_limit: "speed_limit.csv".into(),
            ood: "ood.csv".into(),
            weight: "weight.csv".into(),
            descriptor: "descriptor.bin".into(),
            buffer: None,
        }
    }
}

const DESC_MAGIC: &[u8; 4] = b"BEVD";
const DESC_VERSION: u32 = 1;

fn write_csv_f64(path: &Path, width: usize, height: usize, data: &[f64]) -> Result<()> {
    let mut out = String::new();
    for iy in 0..height {
        let row: Vec<String> = (0..width).map(|ix| data[iy * width + ix].to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn write_csv_bool(path: &Path, width: usize, height: usize, data: &[bool]) -> Result<()> {
    let mut out = String::new();
    for iy in 0..height {
        let row: Vec<&str> = (0..width).map(|ix| if data[iy * width + ix] { "1" } else { "0" }).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn read_csv_f64(path: &Path, width: usize, height: usize) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut data = Vec::with_capacity(width * height);
    for (iy, line) in text.lines().enumerate() {
        let row: std::result::Result<Vec<f64>, _> = line.split(',').map(|t| t.parse::<f64>()).collect();
        let row = row.map_err(|_| Error::format(format!("{}: bad row {iy}", path.display())))?;
        if row.len() != width {
            return Err(Error::format(format!("{}: row {iy} width mismatch", path.display())));
        }
        data.extend(row);
    }
    if data.len() != width * height {
        return Err(Error::format(format!("{}: wrong row count", path.display())));
    }
    Ok(data)
}

fn read_csv_bool(path: &Path, width: usize, height: usize) -> Result<Vec<bool>> {
    let floats = read_csv_f64(path, width, height)?;
    Ok(floats.into_iter().map(|v| v != 0.0).collect())
}

impl BevGrid {
    /// Writes the cost layer alone as CSV.
    pub fn export_cost_csv(&self, path: &Path) -> Result<()> {
        write_csv_f64(path, self.config.width, self.config.height, &self.cost)
    }

    /// Writes the speed-limit layer alone as CSV.
    pub fn export_speed_csv(&self, path: &Path) -> Result<()> {
        write_csv_f64(path, self.config.width, self.config.height, &self.speed_limit)
    }

    /// Writes all layers plus `meta.json` into `dir`. The descriptor layer
    /// is binary: magic `BEVD`, then version/width/height/k as u32 LE, then
    /// `width * height * k` f32 LE in row-major cell order.
    pub fn export(
        &self,
        dir: &Path,
        estimator: Option<&crate::config::EstimatorConfig>,
        buffer_file: Option<&str>,
    ) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let mut layers = LayerFiles::default();
        layers.buffer = buffer_file.map(|s| s.to_string());
        write_csv_f64(&dir.join(&layers.cost), self.config.width, self.config.height, &self.cost)?;
        write_csv_f64(
            &dir.join(&layers.speed_limit),
            self.config.width,
            self.config.height,
            &self.speed_limit,
        )?;
        write_csv_bool(&dir.join(&layers.ood), self.config.width, self.config.height, &self.ood)?;
        write_csv_f64(&dir.join(&layers.weight), self.config.width, self.config.height, &self.weight)?;

        let mut bin = Vec::with_capacity(16 + self.desc.len() * 4);
        bin.extend_from_slice(DESC_MAGIC);
        bin.extend_from_slice(&DESC_VERSION.to_le_bytes());
        bin.extend_from_slice(&(self.config.width as u32).to_le_bytes());
        bin.extend_from_slice(&(self.config.height as u32).to_le_bytes());
        bin.extend_from_slice(&(self.config.k as u32).to_le_bytes());
        for v in &self.desc {
            bin.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let mut f = std::fs::File::create(dir.join(&layers.descriptor))?;
        f.write_all(&bin)?;

        let meta = SnapshotMeta {
            grid: self.config.clone(),
            oob_skipped: self.oob_skipped,
            estimator: estimator.cloned(),
            layers,
        };
        let meta_path = dir.join("meta.json");
        std::fs::write(&meta_path, serde_json::to_string_pretty(&meta).expect("meta serializes"))?;
        Ok(meta_path)
    }

    /// Loads a snapshot from its `meta.json` path.
    pub fn load(meta_path: &Path) -> Result<(Self, SnapshotMeta)> {
        let text = std::fs::read_to_string(meta_path)?;
        let meta: SnapshotMeta = serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("{}: {e}", meta_path.display())))?;
        meta.grid.validate()?;
        let dir = meta_path.parent().unwrap_or_else(|| Path::new("."));
        let (w, h, k) = (meta.grid.width, meta.grid.height, meta.grid.k);

        let cost = read_csv_f64(&dir.join(&meta.layers.cost), w, h)?;
        let speed_limit = read_csv_f64(&dir.join(&meta.layers.speed_limit), w, h)?;
        let ood = read_csv_bool(&dir.join(&meta.layers.ood), w, h)?;
        let weight = read_csv_f64(&dir.join(&meta.layers.weight), w, h)?;

        let mut f = std::fs::File::open(dir.join(&meta.layers.descriptor))?;
        let mut bin = Vec::new();
        f.read_to_end(&mut bin)?;
        let expect = 20 + w * h * k * 4;
        if bin.len() != expect || &bin[0..4] != DESC_MAGIC {
            return Err(Error::format("descriptor layer: bad magic or size"));
        }
        let rd_u32 = |o: usize| u32::from_le_bytes(bin[o..o + 4].try_into().expect("4 bytes"));
        if rd_u32(4) != DESC_VERSION
            || rd_u32(8) as usize != w
            || rd_u32(12) as usize != h
            || rd_u32(16) as usize != k
        {
            return Err(Error::format("descriptor layer: header mismatch"));
        }
        let mut desc = Vec::with_capacity(w * h * k);
        for i in 0..(w * h * k) {
            let o = 20 + i * 4;
            desc.push(f32::from_le_bytes(bin[o..o + 4].try_into().expect("4 bytes")) as f64);
        }

        Ok((
            BevGrid {
                config: meta.grid.clone(),
                desc,
                weight,
                ood,
                cost,
                speed_limit,
                oob_skipped: meta.oob_skipped,
            },
            meta,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn grid(k: usize) -> BevGrid {
        BevGrid::new(GridConfig {
            resolution: 0.5,
            width: 16,
            height: 12,
            origin: (0.0, 0.0),
            k,
            weight_cap: 100.0,
            initial_cost: 0.5,
            initial_speed: 6.0,
        })
        .unwrap()
    }

    fn obs(ix: i64, iy: i64, v: &[f64]) -> CellObservation {
        CellObservation { ix, iy, descriptor: FeatureDescriptor::new(v.to_vec()).unwrap() }
    }

    #[test]
    fn first_observation_copies_descriptor() {
        let mut g = grid(2);
        g.integrate(&[obs(3, 4, &[1.0, 2.0])], 0.5).unwrap();
        assert_eq!(g.descriptor(3, 4).unwrap(), &[1.0, 2.0]);
        assert_eq!(g.weight_at(3, 4), 1.0);
    }

    #[test]
    fn ema_blends_half_and_half() {
        let mut g = grid(2);
        g.integrate(&[obs(3, 4, &[1.0, 2.0])], 0.5).unwrap();
        g.integrate(&[obs(3, 4, &[3.0, 0.0])], 0.5).unwrap();
        assert_eq!(g.descriptor(3, 4).unwrap(), &[2.0, 1.0]);
    }

    #[test]
    fn ema_converges_at_closed_form_rate() {
        let mut g = grid(1);
        let beta = 0.3;
        g.integrate(&[obs(0, 0, &[10.0])], beta).unwrap();
        let target = 2.0;
        let n = 12;
        for _ in 0..n {
            g.integrate(&[obs(0, 0, &[target])], beta).unwrap();
        }
        let expected_err = (1.0f64 - beta).powi(n) * (10.0 - target);
        let actual_err = g.descriptor(0, 0).unwrap()[0] - target;
        assert_relative_eq!(actual_err, expected_err, max_relative = 1e-9);
    }

    #[test]
    fn out_of_bounds_observations_are_tallied_not_fatal() {
        let mut g = grid(1);
        g.integrate(&[obs(-1, 0, &[1.0]), obs(0, 99, &[1.0]), obs(1, 1, &[1.0])], 0.5).unwrap();
        assert_eq!(g.oob_skipped(), 2);
        assert!(g.is_known(1, 1));
    }

    #[test]
    fn weight_saturates_at_cap() {
        let mut g = grid(1);
        for _ in 0..200 {
            g.integrate(&[obs(0, 0, &[1.0])], 1.0).unwrap();
        }
        assert_eq!(g.weight_at(0, 0), 100.0);
    }

    #[test]
    fn bad_beta_rejected() {
        let mut g = grid(1);
        assert!(g.integrate(&[], 0.0).is_err());
        assert!(g.integrate(&[], 1.5).is_err());
    }

    #[test]
    fn recenter_noop_when_pose_central() {
        let mut g = grid(1);
        g.integrate(&[obs(8, 6, &[1.0])], 0.5).unwrap();
        let before = g.clone();
        let shift = g.recenter(4.0, 3.0).unwrap();
        assert_eq!(shift, (0, 0));
        assert_eq!(g, before);
    }

    #[test]
    fn scroll_moves_content_by_whole_cells() {
        let mut g = grid(1);
        g.integrate(&[obs(8, 6, &[7.0])], 0.5).unwrap();
        g.set_cost(8, 6, 0.25);
        g.scroll(3, 0);
        assert!(g.is_known(5, 6));
        assert_eq!(g.descriptor(5, 6).unwrap(), &[7.0]);
        assert_eq!(g.cost_at(5, 6), 0.25);
        assert!(!g.is_known(8, 6));
        assert_eq!(g.origin(), (1.5, 0.0));
    }

    #[test]
    fn scroll_past_extent_clears_grid() {
        let mut g = grid(1);
        g.integrate(&[obs(8, 6, &[7.0])], 0.5).unwrap();
        g.scroll(100, 0);
        assert!(g.known_cells().is_empty());
    }

    #[test]
    fn recenter_then_inverse_restores_retained_cells() {
        let mut g = grid(1);
        for i in 0..10 {
            g.integrate(&[obs(i, 5, &[i as f64])], 0.5).unwrap();
        }
        let before = g.clone();
        g.scroll(2, 1);
        g.scroll(-2, -1);
        // Cells that never left the window are bit-exact.
        for i in 0..10 {
            let (ix, iy) = (i as usize, 5usize);
            if before.is_known(ix, iy) && g.is_known(ix, iy) {
                assert_eq!(before.descriptor(ix, iy), g.descriptor(ix, iy));
            }
        }
    }

    fn mask_from(rows: &[&str]) -> Mask {
        let height = rows.len();
        let width = rows[0].len();
        let mut m = Mask::new(width, height);
        for (iy, row) in rows.iter().enumerate() {
            for (ix, c) in row.chars().enumerate() {
                m.set(ix, iy, c == '1');
            }
        }
        m
    }

    #[test]
    fn opening_removes_isolated_cells() {
        let mut m = Mask::new(9, 9);
        m.set(4, 4, true);
        let opened = morphological_open(&m, 1);
        assert_eq!(opened.count(), 0);
    }

    #[test]
    fn opening_preserves_solid_block() {
        let m = mask_from(&[
            "0000000",
            "0111110",
            "0111110",
            "0111110",
            "0111110",
            "0111110",
            "0000000",
        ]);
        let opened = morphological_open(&m, 1);
        assert_eq!(opened, m);
    }

    #[test]
    fn opening_all_false_stays_false() {
        let m = Mask::new(5, 5);
        assert_eq!(morphological_open(&m, 1).count(), 0);
    }

    #[test]
    fn ood_mask_flags_distant_descriptors_only_on_known_cells() {
        let clusters = ClusterSet::new(vec![vec![0.0, 0.0], vec![1.0, 0.0]], 0.5).unwrap();
        let mut g = grid(2);
        g.integrate(&[obs(1, 1, &[0.1, 0.9]), obs(2, 2, &[5.0, 5.0])], 0.5).unwrap();
        let m = g.ood_mask(&clusters);
        assert!(!m.get(1, 1));
        assert!(m.get(2, 2));
        assert!(!m.get(0, 0)); // unknown stays false
    }

    #[test]
    fn export_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = grid(3);
        g.integrate(&[obs(1, 2, &[0.5, 1.5, 2.5]), obs(4, 4, &[3.0, 0.0, 1.0])], 0.7).unwrap();
        g.set_cost(1, 2, 0.875);
        g.set_ood(4, 4, true);
        let meta_path = g.export(dir.path(), None, None).unwrap();
        let (loaded, meta) = BevGrid::load(&meta_path).unwrap();
        assert_eq!(loaded.config(), g.config());
        assert_eq!(meta.oob_skipped, 0);
        assert_eq!(loaded.cost_at(1, 2), 0.875);
        assert!(loaded.ood_at(4, 4));
        // Descriptors round-trip through f32.
        for (a, b) in loaded.descriptor(1, 2).unwrap().iter().zip(g.descriptor(1, 2).unwrap()) {
            assert_relative_eq!(*a, *b, max_relative = 1e-6);
        }
    }

    proptest! {
        #[test]
        fn ema_is_convex(old in 0.0f64..10.0, new in 0.0f64..10.0, beta in 0.01f64..=1.0) {
            let mut g = grid(1);
            g.integrate(&[obs(0, 0, &[old])], beta).unwrap();
            g.integrate(&[obs(0, 0, &[new])], beta).unwrap();
            let fused = g.descriptor(0, 0).unwrap()[0];
            prop_assert!(fused >= old.min(new) - 1e-12);
            prop_assert!(fused <= old.max(new) + 1e-12);
        }

        #[test]
        fn opening_is_idempotent_and_bounded_by_dilation(bits in proptest::collection::vec(any::<bool>(), 81)) {
            let m = Mask { width: 9, height: 9, data: bits };
            let once = morphological_open(&m, 1);
            let twice = morphological_open(&once, 1);
            prop_assert_eq!(&once, &twice);
            let dil = dilate(&m, 1);
            for i in 0..once.data.len() {
                prop_assert!(!once.data[i] || dil.data[i]);
            }
        }
    }
}
