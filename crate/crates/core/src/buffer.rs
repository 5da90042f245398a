//! Bounded experience store with semantically balanced eviction.
//!
//! At capacity the buffer discards the oldest sample of the most populous
//! (semantic class, speed bin) pair instead of the globally oldest sample,
//! which keeps rare terrain represented while a single terrain type floods
//! the stream. Pinned samples are permanent labels and never evicted.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::feature_space::FeatureDescriptor;

/// One unit of driving experience.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperienceSample {
    pub descriptor: FeatureDescriptor,
    /// m/s, >= 0.
    pub speed: f64,
    /// [0, 1].
    pub roughness: f64,
    /// Seconds.
    pub timestamp: f64,
    pub pinned: bool,
}

impl ExperienceSample {
    fn validate(&self) -> Result<()> {
        if !self.speed.is_finite() || self.speed < 0.0 {
            return Err(Error::invalid("speed must be finite and >= 0"));
        }
        if !self.roughness.is_finite() || !(0.0..=1.0).contains(&self.roughness) {
            return Err(Error::invalid("roughness must lie in [0, 1]"));
        }
        if !self.timestamp.is_finite() {
            return Err(Error::invalid("timestamp must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BufferConfig {
    pub capacity: usize,
    /// Speed bin width for the eviction pair, m/s.
    pub speed_bin_width: f64,
    /// Speed normalizer for the pairwise-distance metric (the configured
    /// maximum speed).
    pub max_speed: f64,
}

impl Default for BufferConfig {
    fn default() -> Self {
        BufferConfig { capacity: 512, speed_bin_width: 1.0, max_speed: 6.0 }
    }
}

impl BufferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.capacity < 2 {
            return Err(Error::invalid("capacity must be at least 2"));
        }
        if !(self.speed_bin_width > 0.0) {
            return Err(Error::invalid("speed bin width must be positive"));
        }
        if !(self.max_speed > 0.0) {
            return Err(Error::invalid("max speed must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Slot {
    sample: ExperienceSample,
    seq: u64,
    class: usize,
    speed_bin: u64,
}

#[derive(Debug, Clone)]
pub struct ExperienceBuffer {
    slots: Vec<Slot>,
    next_seq: u64,
    config: BufferConfig,
}

impl ExperienceBuffer {
    pub fn new(config: BufferConfig) -> Result<Self> {
        config.validate()?;
        Ok(ExperienceBuffer { slots: Vec::new(), next_seq: 0, config })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn config(&self) -> &BufferConfig {
        &self.config
    }

    pub fn pinned_count(&self) -> usize {
        self.slots.iter().filter(|s| s.sample.pinned).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ExperienceSample> {
        self.slots.iter().map(|s| &s.sample)
    }

    /// Immutable copy of the samples in insertion-age order, for training.
    pub fn snapshot(&self) -> Vec<ExperienceSample> {
        self.slots.iter().map(|s| s.sample.clone()).collect()
    }

    fn push(&mut self, sample: ExperienceSample) {
        let class = sample.descriptor.nearest_class();
        let speed_bin = (sample.speed / self.config.speed_bin_width).floor() as u64;
        let seq = self.next_seq;
        self.next_seq += 1;
        self.slots.push(Slot { sample, seq, class, speed_bin });
    }

    /// Appends a sample and evicts until the buffer is back at capacity.
    pub fn insert(&mut self, sample: ExperienceSample) -> Result<()> {
        sample.validate()?;
        self.push(sample);
        while self.slots.len() > self.config.capacity {
            self.evict()?;
        }
        Ok(())
    }

    /// Removes the oldest sample of the most populous unpinned
    /// (class, speed bin) pair; ties go to the pair holding the globally
    /// oldest sample. Returns the removed sample's id.
    pub fn evict(&mut self) -> Result<u64> {
        // (count, oldest seq in pair) per pair, unpinned only.
        let mut pairs: BTreeMap<(usize, u64), (usize, u64)> = BTreeMap::new();
        for slot in &self.slots {
            if slot.sample.pinned {
                continue;
            }
            let entry = pairs.entry((slot.class, slot.speed_bin)).or_insert((0, u64::MAX));
            entry.0 += 1;
            entry.1 = entry.1.min(slot.seq);
        }
        let (_, &(_, victim_seq)) = pairs
            .iter()
            .max_by(|a, b| {
                // Highest count wins; on ties, the pair with the smaller
                // oldest-seq (i.e. containing the globally oldest sample).
                (a.1 .0, std::cmp::Reverse(a.1 .1)).cmp(&(b.1 .0, std::cmp::Reverse(b.1 .1)))
            })
            .ok_or_else(|| Error::invalid("buffer full: every sample is pinned"))?;
        let pos = self
            .slots
            .iter()
            .position(|s| s.seq == victim_seq)
            .expect("victim seq present");
        self.slots.remove(pos);
        Ok(victim_seq)
    }

    /// Permanently associates a descriptor with a roughness at each listed
    /// speed. Pinned samples are exempt from eviction; the pin budget is
    /// half the capacity so pins cannot starve adaptation.
    pub fn pin(
        &mut self,
        descriptor: FeatureDescriptor,
        roughness: f64,
        speeds: &[f64],
        timestamp: f64,
    ) -> Result<()> {
        if speeds.is_empty() {
            return Err(Error::invalid("pin needs at least one speed"));
        }
        if self.pinned_count() + speeds.len() > self.config.capacity / 2 {
            return Err(Error::invalid(format!(
                "pin budget exceeded: {} pinned + {} new > capacity/2 = {}",
                self.pinned_count(),
                speeds.len(),
                self.config.capacity / 2
            )));
        }
        for &speed in speeds {
            let sample = ExperienceSample {
                descriptor: descriptor.clone(),
                speed,
                roughness,
                timestamp,
                pinned: true,
            };
            sample.validate()?;
            self.push(sample);
        }
        while self.slots.len() > self.config.capacity {
            self.evict()?;
        }
        Ok(())
    }

    /// Mean Euclidean distance between all unordered pairs of joint vectors
    /// `[descriptor ; speed / max_speed]`.
    pub fn avg_pairwise_distance(&self) -> Result<f64> {
        let n = self.slots.len();
        if n < 2 {
            return Err(Error::invalid("need at least 2 samples"));
        }
        let joints: Vec<Vec<f64>> = self
            .slots
            .iter()
            .map(|s| {
                let mut v = s.sample.descriptor.values().to_vec();
                v.push(s.sample.speed / self.config.max_speed);
                v
            })
            .collect();
        let mut total = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let d2: f64 = joints[i]
                    .iter()
                    .zip(&joints[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                total += d2.sqrt();
            }
        }
        Ok(total / (n * (n - 1) / 2) as f64)
    }

    /// One sample per line: `t S R pinned k-descriptor-values`, shortest
    /// round-trip decimals. Reload reproduces eviction state exactly because
    /// age order is the line order.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for slot in &self.slots {
            let s = &slot.sample;
            write!(out, "{} {} {} {}", s.timestamp, s.speed, s.roughness, u8::from(s.pinned))
                .expect("string write");
            for v in s.descriptor.values() {
                write!(out, " {v}").expect("string write");
            }
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path, config: BufferConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut buffer = ExperienceBuffer::new(config)?;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::format(format!("{} line {}: {msg}", path.display(), i + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() < 5 {
                return Err(bad("expected `t S R pinned descriptor...`"));
            }
            let t: f64 = fields[0].parse().map_err(|_| bad("bad timestamp"))?;
            let speed: f64 = fields[1].parse().map_err(|_| bad("bad speed"))?;
            let roughness: f64 = fields[2].parse().map_err(|_| bad("bad roughness"))?;
            let pinned = match fields[3] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("bad pinned flag")),
            };
            let desc: std::result::Result<Vec<f64>, _> =
                fields[4..].iter().map(|t| t.parse::<f64>()).collect();
            let descriptor = FeatureDescriptor::new(desc.map_err(|_| bad("bad descriptor value"))?)
                .map_err(|e| bad(&e.to_string()))?;
            let sample = ExperienceSample { descriptor, speed, roughness, timestamp: t, pinned };
            sample.validate().map_err(|e| bad(&e.to_string()))?;
            buffer.push(sample);
        }
        if buffer.len() > buffer.config.capacity {
            return Err(Error::format(format!(
                "{}: checkpoint holds {} samples, capacity {}",
                path.display(),
                buffer.len(),
                buffer.config.capacity
            )));
        }
        Ok(buffer)
    }
}
