//! Line-delimited episode log.
//!
//! One JSON object per line, tagged by record type. Floats serialize as
//! shortest round-trip decimals, so a written log re-read and re-written is
//! byte-identical.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogRecord {
    Header(HeaderRecord),
    Tick(TickRecord),
    Lap(super::episode::LapMetrics),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeaderRecord {
    pub version: u32,
    pub seed: u64,
    pub world_seed: u64,
    pub tick_hz: f64,
    pub laps: usize,
    pub r_max: f64,
    pub alpha_r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: u64,
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub steer: f64,
    /// Roughness measured from the synthesized proprioception window; None
    /// when the vehicle is off the map.
    pub measured_roughness: Option<f64>,
    /// Ground-truth g(class, speed) label at the vehicle cell.
    pub true_roughness: Option<f64>,
    /// Rasterized speed limit at the vehicle cell, when known.
    pub speed_limit: Option<f64>,
    pub alpha_s: f64,
    /// Vehicle is on a lethal-class cell this tick.
    pub lethal: bool,
    /// Non-lethal cell whose true roughness exceeds r_max + 0.1.
    pub undesirable: bool,
    pub lap: usize,
}

pub const LOG_VERSION: u32 = 1;

pub fn write_log(path: &Path, records: &[LogRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a log, stopping cleanly at the first malformed or truncated line.
/// Returns the complete records plus the number of lines skipped.
pub fn read_log(path: &Path) -> Result<(Vec<LogRecord>, usize)> {
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    let mut skipped = 0;
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<LogRecord>(line) {
            Ok(r) => records.push(r),
            Err(_) => {
                skipped = 1 + text.lines().count() - records.len() - 1;
                break;
            }
        }
    }
    if records.is_empty() && skipped == 0 {
        return Err(Error::format(format!("{}: empty log", path.display())));
    }
    Ok((records, skipped))
}
