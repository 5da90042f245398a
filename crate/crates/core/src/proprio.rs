//! Proprioceptive roughness.
//!
//! Ride harshness is summarized as a weighted sum of per-channel bandpowers
//! over configured frequency bands, clamped to [0, 1]. Band parameters and
//! weights are fit to human-scored segments by minimizing cumulative L1
//! error with a seeded multistart plus Nelder-Mead refinement.

use std::cell::RefCell;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim;

/// A proprioceptive channel: body accelerations or a shock-travel sensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Channel {
    AccelX,
    AccelY,
    AccelZ,
    Shock(u8),
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Channel::AccelX => write!(f, "ax"),
            Channel::AccelY => write!(f, "ay"),
            Channel::AccelZ => write!(f, "az"),
            Channel::Shock(i) => write!(f, "shock{i}"),
        }
    }
}

impl FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ax" => Ok(Channel::AccelX),
            "ay" => Ok(Channel::AccelY),
            "az" => Ok(Channel::AccelZ),
            other => {
                if let Some(idx) = other.strip_prefix("shock") {
                    let i: u8 = idx
                        .parse()
                        .map_err(|_| Error::invalid(format!("bad channel name `{other}`")))?;
                    Ok(Channel::Shock(i))
                } else {
                    Err(Error::invalid(format!("bad channel name `{other}`")))
                }
            }
        }
    }
}

impl From<Channel> for String {
    fn from(c: Channel) -> String {
        c.to_string()
    }
}

impl TryFrom<String> for Channel {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Windowed multi-channel proprioceptive samples at a fixed rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProprioWindow {
    sample_rate: f64,
    channels: Vec<(Channel, Vec<f64>)>,
}

impl ProprioWindow {
    pub fn new(sample_rate: f64, channels: Vec<(Channel, Vec<f64>)>) -> Result<Self> {
        if !(sample_rate > 0.0) || !sample_rate.is_finite() {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if channels.is_empty() {
            return Err(Error::invalid("window needs at least one channel"));
        }
        let len = channels[0].1.len();
        if len < 2 {
            return Err(Error::invalid("channels need at least 2 samples"));
        }
        for (c, data) in &channels {
            if data.len() != len {
                return Err(Error::invalid(format!("channel {c} length differs")));
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("channel {c} has non-finite samples")));
            }
        }
        for i in 0..channels.len() {
            for j in (i + 1)..channels.len() {
                if channels[i].0 == channels[j].0 {
                    return Err(Error::invalid(format!("duplicate channel {}", channels[i].0)));
                }
            }
        }
        Ok(ProprioWindow { sample_rate, channels })
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.channels[0].1.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.sample_rate
    }

    pub fn channel(&self, c: Channel) -> Option<&[f64]> {
        self.channels
            .iter()
            .find(|(name, _)| *name == c)
            .map(|(_, data)| data.as_slice())
    }

    pub fn channels(&self) -> impl Iterator<Item = Channel> + '_ {
        self.channels.iter().map(|(c, _)| *c)
    }
}

/// Per-channel bandpower weighting: roughness = clamp(sum w_i * BP_i, 0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelBand {
    pub channel: Channel,
    pub weight: f64,
    /// Seconds of trailing signal used for this channel.
    pub window_s: f64,
    pub f_min: f64,
    pub f_max: f64,
}

/// Window length bounds for fitting, seconds.
pub const WINDOW_S_MIN: f64 = 0.25;
pub const WINDOW_S_MAX: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoughnessParams {
    pub channels: Vec<ChannelBand>,
}

impl RoughnessParams {
    pub fn validate(&self, sample_rate: f64) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::invalid("roughness params need at least one channel"));
        }
        for b in &self.channels {
            if !(b.weight >= 0.0) || !b.weight.is_finite() {
                return Err(Error::invalid(format!("channel {}: weight must be >= 0", b.channel)));
            }
            if !(b.window_s > 0.0) {
                return Err(Error::invalid(format!("channel {}: window must be > 0", b.channel)));
            }
            check_band(b.f_min, b.f_max, sample_rate)?;
        }
        Ok(())
    }

    /// Vertical-acceleration-only default: unit weight over 1-10 Hz of the
    /// trailing second.
    pub fn default_accel_z() -> Self {
        RoughnessParams {
            channels: vec![ChannelBand {
                channel: Channel::AccelZ,
                weight: 1.0,
                window_s: 1.0,
                f_min: 1.0,
                f_max: 10.0,
            }],
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::format(format!("serialize roughness params: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))
    }
}

/// One human-scored window, score in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedSegment {
    pub window: ProprioWindow,
    pub score: f64,
}

impl AnnotatedSegment {
    pub fn new(window: ProprioWindow, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::invalid("score must lie in [0, 1]"));
        }
        Ok(AnnotatedSegment { window, score })
    }
}

/// Reads line-delimited JSON segments (one object per line).
pub fn load_segments(path: &Path) -> Result<Vec<AnnotatedSegment>> {
    let text = std::fs::read_to_string(path)?;
    let mut segments = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let seg: AnnotatedSegment = serde_json::from_str(line)
            .map_err(|e| Error::format(format!("{} line {}: {e}", path.display(), i + 1)))?;
        if !(0.0..=1.0).contains(&seg.score) {
            return Err(Error::format(format!(
                "{} line {}: score outside [0, 1]",
                path.display(),
                i + 1
            )));
        }
        segments.push(seg);
    }
    Ok(segments)
}

pub fn save_segments(path: &Path, segments: &[AnnotatedSegment]) -> Result<()> {
    let mut out = String::new();
    for seg in segments {
        out.push_str(&serde_json::to_string(seg).expect("segment serializes"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn check_band(f_min: f64, f_max: f64, fs: f64) -> Result<()> {
    if !(f_min >= 0.0 && f_min < f_max && f_max <= fs / 2.0 + 1e-12) {
        return Err(Error::invalid(format!(
            "band [{f_min}, {f_max}] must satisfy 0 <= f_min < f_max <= fs/2 = {}",
            fs / 2.0
        )));
    }
    Ok(())
}

thread_local! {
    static FFT_PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// One-sided mean-removed Hann periodogram; `psd[k]` is at `k * fs / n`.
fn periodogram(samples: &[f64], fs: f64) -> Vec<f64> {
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = Vec::with_capacity(n);
    let mut window_power = 0.0;
    for (i, &s) in samples.iter().enumerate() {
        // Periodic Hann window.
        let w = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos());
        window_power += w * w;
        buf.push(Complex::new((s - mean) * w, 0.0));
    }
    FFT_PLANNER.with(|p| {
        let fft = p.borrow_mut().plan_fft_forward(n);
        fft.process(&mut buf);
    });
    let bins = n / 2 + 1;
    let scale = 1.0 / (fs * window_power);
    let mut psd = Vec::with_capacity(bins);
    for (k, v) in buf.iter().take(bins).enumerate() {
        let mut p = v.norm_sqr() * scale;
        // Interior bins carry both halves of the spectrum.
        let interior = k != 0 && !(n % 2 == 0 && k == n / 2);
        if interior {
            p *= 2.0;
        }
        psd.push(p);
    }
    psd
}

/// Integrates the piecewise-linear interpolant of `(k*df, psd[k])` over
/// `[a, b]`. Exact for any split point, so adjacent bands add exactly.
fn integrate_psd(psd: &[f64], df: f64, a: f64, b: f64) -> f64 {
    debug_assert!(a <= b);
    let value_at = |f: f64| -> f64 {
        let pos = f / df;
        let i = (pos.floor() as usize).min(psd.len() - 1);
        if i + 1 >= psd.len() {
            return psd[psd.len() - 1];
        }
        let frac = pos - i as f64;
        psd[i] * (1.0 - frac) + psd[i + 1] * frac
    };
    // Walk grid segments by index so float rounding cannot stall the loop.
    let first = (a / df).floor() as i64;
    let last = (b / df).floor() as i64;
    let mut total = 0.0;
    for seg in first..=last {
        let lo = (seg as f64 * df).max(a);
        let hi = ((seg + 1) as f64 * df).min(b);
        if hi > lo {
            total += 0.5 * (value_at(lo) + value_at(hi)) * (hi - lo);
        }
    }
    total
}

/// Bandpower of one channel over `[f_min, f_max]`: mean-removed one-segment
/// Hann periodogram integrated with the trapezoidal rule.
pub fn bandpower(samples: &[f64], fs: f64, f_min: f64, f_max: f64) -> Result<f64> {
    if samples.len() < 8 {
        return Err(Error::invalid("bandpower needs at least 8 samples"));
    }
    if !(fs > 0.0) {
        return Err(Error::invalid("sample rate must be positive"));
    }
    check_band(f_min, f_max, fs)?;
    let psd = periodogram(samples, fs);
    let df = fs / samples.len() as f64;
    Ok(integrate_psd(&psd, df, f_min, f_max.min(fs / 2.0)))
}

/// Weighted sum of trailing-window bandpowers, clamped to [0, 1].
pub fn roughness(window: &ProprioWindow, params: &RoughnessParams) -> Result<f64> {
    params.validate(window.sample_rate())?;
    let fs = window.sample_rate();
    let mut total = 0.0;
    for band in &params.channels {
        let data = window
            .channel(band.channel)
            .ok_or_else(|| Error::invalid(format!("window missing channel {}", band.channel)))?;
        let take = (band.window_s * fs).round() as usize;
        if take > data.len() {
            return Err(Error::invalid(format!(
                "channel {} shorter ({} samples) than configured window {}s",
                band.channel,
                data.len(),
                band.window_s
            )));
        }
        let tail = &data[data.len() - take..];
        total += band.weight * bandpower(tail, fs, band.f_min, band.f_max)?;
    }
    Ok(total.clamp(0.0, 1.0))
}

/// Result of a roughness parameter fit.
#[derive(Debug, Clone)]
pub struct RoughnessFit {
    pub params: RoughnessParams,
    /// Cumulative L1 error of `params` over the training segments.
    pub loss: f64,
    /// Objective value of every multistart initialization, for diagnostics.
    pub start_losses: Vec<f64>,
}

pub const FIT_MULTISTARTS: usize = 64;
const FIT_REFINE_TOP: usize = 8;
const FIT_NM_ITERS: usize = 250;
const MIN_BANDWIDTH_HZ: f64 = 0.25;

/// Fits per-channel (weight, window, band) parameters minimizing cumulative
/// L1 error against the segment scores. Seeded multistart (64 starts), then
/// Nelder-Mead refinement of the best 8; deterministic given `seed`.
pub fn fit_roughness_params(segments: &[AnnotatedSegment], seed: u64) -> Result<RoughnessFit> {
    if segments.len() < 2 {
        return Err(Error::invalid("need at least 2 annotated segments"));
    }
    let fs = segments[0].window.sample_rate();
    if segments.iter().any(|s| s.window.sample_rate() != fs) {
        return Err(Error::invalid("segments must share one sample rate"));
    }
    // Channels available in every segment, canonical order.
    let mut channels: Vec<Channel> = segments[0].window.channels().collect();
    channels.retain(|c| segments.iter().all(|s| s.window.channel(*c).is_some()));
    channels.sort();
    if channels.is_empty() {
        return Err(Error::invalid("segments share no common channel"));
    }
    let min_duration = segments
        .iter()
        .map(|s| s.window.duration())
        .fold(f64::INFINITY, f64::min);
    let nyquist = fs / 2.0;
    let s_lo = WINDOW_S_MIN.max(8.0 / fs);
    let s_hi = WINDOW_S_MAX.min(min_duration);
    if s_lo > s_hi {
        return Err(Error::invalid("segments too short for the window bounds"));
    }

    // Per channel: weight, window_s, f_min, f_max.
    let dims = channels.len() * 4;
    let mut lo = Vec::with_capacity(dims);
    let mut hi = Vec::with_capacity(dims);
    for _ in &channels {
        lo.extend_from_slice(&[0.0, s_lo, 0.0, MIN_BANDWIDTH_HZ]);
        hi.extend_from_slice(&[50.0, s_hi, nyquist - MIN_BANDWIDTH_HZ, nyquist]);
    }

    let decode = |x: &[f64]| -> RoughnessParams {
        let bands = channels
            .iter()
            .enumerate()
            .map(|(i, &channel)| {
                let weight = x[i * 4].clamp(0.0, 50.0);
                let window_s = x[i * 4 + 1].clamp(s_lo, s_hi);
                let mut f_min = x[i * 4 + 2].clamp(0.0, nyquist - MIN_BANDWIDTH_HZ);
                let mut f_max = x[i * 4 + 3].clamp(MIN_BANDWIDTH_HZ, nyquist);
                if f_max < f_min + MIN_BANDWIDTH_HZ {
                    f_max = f_min + MIN_BANDWIDTH_HZ;
                    if f_max > nyquist {
                        f_max = nyquist;
                        f_min = nyquist - MIN_BANDWIDTH_HZ;
                    }
                }
                ChannelBand { channel, weight, window_s, f_min, f_max }
            })
            .collect();
        RoughnessParams { channels: bands }
    };

    let objective = |x: &[f64]| -> f64 {
        let params = decode(x);
        let mut errors: Vec<f64> = segments
            .iter()
            .map(|seg| match roughness(&seg.window, &params) {
                Ok(r) => (r - seg.score).abs(),
                Err(_) => f64::MAX / 1e6,
            })
            .collect();
        // Sorted summation keeps the objective invariant under segment
        // permutation, so identical seeds give identical fits.
        errors.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
        errors.iter().sum()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts: Vec<(Vec<f64>, f64)> = Vec::with_capacity(FIT_MULTISTARTS);
    for _ in 0..FIT_MULTISTARTS {
        let mut x = Vec::with_capacity(dims);
        for _ in &channels {
            let w: f64 = rng.gen_range(0.0..5.0);
            let s: f64 = rng.gen_range(s_lo..=s_hi);
            let f_a: f64 = rng.gen_range(0.0..nyquist);
            let f_b: f64 = rng.gen_range(0.0..nyquist);
            let (f_min, f_max) = if f_a <= f_b { (f_a, f_b) } else { (f_b, f_a) };
            x.extend_from_slice(&[w, s, f_min, f_max.max(f_min + MIN_BANDWIDTH_HZ).min(nyquist)]);
        }
        let fx = objective(&x);
        starts.push((x, fx));
    }
    let start_losses: Vec<f64> = starts.iter().map(|(_, f)| *f).collect();

    let mut order: Vec<usize> = (0..starts.len()).collect();
    order.sort_by(|&a, &b| starts[a].1.partial_cmp(&starts[b].1).expect("finite losses"));

    let mut best: Option<(Vec<f64>, f64)> = None;
    for &i in order.iter().take(FIT_REFINE_TOP) {
        let (x, fx) = optim::nelder_mead(objective, &starts[i].0, &lo, &hi, FIT_NM_ITERS);
        let candidate = if fx <= starts[i].1 { (x, fx) } else { starts[i].clone() };
        best = match best {
            Some(b) if b.1 <= candidate.1 => Some(b),
            _ => Some(candidate),
        };
    }
    let (x, loss) = best.expect("at least one start");
    Ok(RoughnessFit { params: decode(&x), loss, start_losses })
}
