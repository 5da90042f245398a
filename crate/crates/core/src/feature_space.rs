//! Compressed VLAD feature space.
//!
//! High-dimensional embeddings are summarized as vectors of L1 distances to
//! a fixed set of cluster centers. The minimum entry doubles as an
//! out-of-distribution score: terrain far from every cluster is unknown.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

use crate::error::{Error, Result};

/// One feature embedding of fixed dimension `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("embedding must be non-empty"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embedding contains non-finite entries"));
        }
        Ok(Embedding { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Fitted cluster centers plus the OOD distance threshold `tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSet {
    centers: Vec<Vec<f64>>,
    tau: f64,
}

impl ClusterSet {
    pub fn new(centers: Vec<Vec<f64>>, tau: f64) -> Result<Self> {
        if centers.len() < 2 {
            return Err(Error::invalid("cluster set needs at least 2 centers"));
        }
        let dim = centers[0].len();
        if dim == 0 || centers.iter().any(|c| c.len() != dim) {
            return Err(Error::invalid("cluster centers must share a non-zero dimension"));
        }
        if centers.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("cluster centers contain non-finite entries"));
        }
        for i in 0..centers.len() {
            for j in (i + 1)..centers.len() {
                if centers[i] == centers[j] {
                    return Err(Error::invalid(format!("duplicate cluster centers {i} and {j}")));
                }
            }
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::invalid("tau must be a positive finite real"));
        }
        Ok(ClusterSet { centers, tau })
    }

    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    /// Same centers with a caller-chosen OOD threshold.
    pub fn with_tau(self, tau: f64) -> Result<Self> {
        ClusterSet::new(self.centers, tau)
    }

    /// Serializes as a flat text file: header `k C tau`, then `k` rows of
    /// `C` space-separated decimals. Decimal formatting is
    /// shortest-round-trip, so save/load is bit-exact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        writeln!(out, "{} {} {}", self.k(), self.dim(), self.tau).expect("string write");
        for center in &self.centers {
            let row: Vec<String> = center.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", row.join(" ")).expect("string write");
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))
    }

    fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines();
        let header = lines.next().ok_or("missing header line")?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 3 {
            return Err("header must be `k C tau`".into());
        }
        let k: usize = fields[0].parse().map_err(|_| "bad k in header")?;
        let dim: usize = fields[1].parse().map_err(|_| "bad C in header")?;
        let tau: f64 = fields[2].parse().map_err(|_| "bad tau in header")?;
        let mut centers = Vec::with_capacity(k);
        for (i, line) in lines.enumerate().take(k) {
            let row: std::result::Result<Vec<f64>, _> =
                line.split_whitespace().map(|t| t.parse::<f64>()).collect();
            let row = row.map_err(|_| format!("bad value in row {i}"))?;
            if row.len() != dim {
                return Err(format!("row {i} has {} values, expected {dim}", row.len()));
            }
            centers.push(row);
        }
        if centers.len() != k {
            return Err(format!("expected {k} rows, found {}", centers.len()));
        }
        ClusterSet::new(centers, tau).map_err(|e| e.to_string())
    }
}

/// VLAD descriptor: entry `j` is the L1 distance to cluster center `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDescriptor {
    values: Vec<f64>,
}

impl FeatureDescriptor {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("descriptor must be non-empty"));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("descriptor entries must be finite and >= 0"));
        }
        Ok(FeatureDescriptor { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Index of the closest cluster; ties go to the lowest index.
    pub fn nearest_class(&self) -> usize {
        let mut best = 0;
        for (j, v) in self.values.iter().enumerate() {
            if *v < self.values[best] {
                best = j;
            }
        }
        best
    }

    /// Distance to the closest cluster.
    pub fn ood_score(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn is_ood(&self, clusters: &ClusterSet) -> bool {
        self.ood_score() > clusters.tau()
    }
}

/// Computes the VLAD descriptor of `d` against `clusters`.
pub fn vlad_descriptor(d: &Embedding, clusters: &ClusterSet) -> Result<FeatureDescriptor> {
    if d.dim() != clusters.dim() {
        return Err(Error::invalid(format!(
            "embedding dim {} does not match cluster dim {}",
            d.dim(),
            clusters.dim()
        )));
    }
    let values = clusters
        .centers
        .iter()
        .map(|center| l1_distance(d.values(), center))
        .collect();
    FeatureDescriptor::new(values)
}

fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn sq_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Uniform subsample without replacement, deterministic in `seed`.
pub fn subsample(samples: &[Embedding], count: usize, seed: u64) -> Vec<Embedding> {
    if count >= samples.len() {
        return samples.to_vec();
    }
    // Partial Fisher-Yates over an index vector.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    for i in 0..count {
        let j = rng.gen_range(i..idx.len());
        idx.swap(i, j);
    }
    idx[..count].iter().map(|&i| samples[i].clone()).collect()
}

const KMEANS_MAX_ITERS: usize = 100;
const KMEANS_MOVE_TOL: f64 = 1e-6;

/// Fits `k` centers via Lloyd's algorithm with k-means++ initialization and
/// sets `tau` to the 95th percentile of the samples' min L1 distances.
///
/// Deterministic given (samples, k, seed).
pub fn fit_clusters(samples: &[Embedding], k: usize, seed: u64) -> Result<ClusterSet> {
    if k < 2 {
        return Err(Error::invalid("k must be at least 2"));
    }
    if samples.len() < k {
        return Err(Error::invalid(format!(
            "need at least k = {k} samples, got {}",
            samples.len()
        )));
    }
    let dim = samples[0].dim();
    if samples.iter().any(|s| s.dim() != dim) {
        return Err(Error::invalid("samples have mixed dimensions"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = kmeans_pp_init(samples, k, &mut rng)?;
    lloyd(samples, &mut centers, KMEANS_MAX_ITERS);

    let tau = percentile_min_l1(samples, &centers, 0.95);
    ClusterSet::new(centers, tau.max(f64::MIN_POSITIVE))
}

fn kmeans_pp_init(samples: &[Embedding], k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let n = samples.len();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = rng.gen_range(0..n);
    centers.push(samples[first].values().to_vec());

    let mut min_d2 = vec![0.0f64; n];
    for (i, s) in samples.iter().enumerate() {
        min_d2[i] = sq_distance(s.values(), &centers[0]);
    }
    while centers.len() < k {
        let total: f64 = min_d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, d) in min_d2.iter().enumerate() {
                acc += d;
                if acc >= target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // All remaining samples coincide with a chosen center; take the
            // first sample not already present so duplicates surface as a
            // validation error instead of a silent degenerate set.
            (0..n)
                .find(|&i| !centers.iter().any(|c| c[..] == *samples[i].values()))
                .ok_or_else(|| Error::invalid("fewer than k distinct samples"))?
        };
        centers.push(samples[next].values().to_vec());
        for (i, s) in samples.iter().enumerate() {
            let d = sq_distance(s.values(), centers.last().unwrap());
            if d < min_d2[i] {
                min_d2[i] = d;
            }
        }
    }
    Ok(centers)
}

/// Runs Lloyd iterations in place; returns the per-iteration objective
/// (sum of squared distances to assigned centers) for diagnostics.
fn lloyd(samples: &[Embedding], centers: &mut Vec<Vec<f64>>, max_iters: usize) -> Vec<f64> {
    let k = centers.len();
    let dim = centers[0].len();
    let mut objectives = Vec::new();
    for _ in 0..max_iters {
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        let mut objective = 0.0;
        for s in samples {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in centers.iter().enumerate() {
                let d = sq_distance(s.values(), c);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            objective += best_d;
            counts[best] += 1;
            for (acc, v) in sums[best].iter_mut().zip(s.values()) {
                *acc += v;
            }
        }
        objectives.push(objective);

        let mut max_move2 = 0.0f64;
        for j in 0..k {
            if counts[j] == 0 {
                continue; // empty cluster keeps its center
            }
            let inv = 1.0 / counts[j] as f64;
            let mut move2 = 0.0;
            for (c, s) in centers[j].iter_mut().zip(&sums[j]) {
                let new = s * inv;
                move2 += (new - *c) * (new - *c);
                *c = new;
            }
            max_move2 = max_move2.max(move2);
        }
        if max_move2.sqrt() < KMEANS_MOVE_TOL {
            break;
        }
    }
    objectives
}

fn percentile_min_l1(samples: &[Embedding], centers: &[Vec<f64>], q: f64) -> f64 {
    let mut dists: Vec<f64> = samples
        .iter()
        .map(|s| {
            centers
                .iter()
                .map(|c| l1_distance(s.values(), c))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    // Nearest-rank percentile.
    let rank = ((q * dists.len() as f64).ceil() as usize).clamp(1, dists.len());
    dists[rank - 1]
}
