use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::HeightField;
use crate::dataset::TactileSweep;
use crate::error::{Error, Result};
use crate::seed::Rng;

// Channel gains of the contact model. Channels are dimensionless and are
// layer-normalized downstream; the gains only keep them on comparable scales.
const ACCEL_ALONG_GAIN: f64 = 1.0;
const ACCEL_LATERAL_GAIN: f64 = 10.0;
const ACCEL_VERTICAL_GAIN_UM: f64 = 50.0;
const PRELOAD: f64 = 1.0;
const PRESSURE_HEIGHT_GAIN: f64 = 0.1;
const PRESSURE_SLOPE_GAIN: f64 = 3.0;
const STICK_LOAD_GAIN: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub speed_mm_min: f64,
    pub sample_rate_hz: f64,
    pub samples: usize,
    /// Scales how often the probe stalls and how much tangential load builds up.
    pub stick_slip_level: f64,
    /// Standard deviation of additive noise on every channel.
    pub contact_noise: f64,
    /// Half-width of the per-sweep contact-gain variation.
    pub contact_jitter: f64,
    /// Path direction relative to the specimen length axis, and its jitter.
    pub angle_deg: f64,
    pub angle_jitter_deg: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            speed_mm_min: 50.0,
            // 4 µm between samples at 50 mm/min
            sample_rate_hz: 50_000.0 / 60.0 / 4.0,
            samples: 500,
            stick_slip_level: 0.25,
            contact_noise: 0.05,
            contact_jitter: 0.2,
            angle_deg: 30.0,
            angle_jitter_deg: 10.0,
        }
    }
}

impl SweepConfig {
    /// Distance advanced per sample (µm).
    pub fn sample_spacing_um(&self) -> f64 {
        self.speed_mm_min * 1000.0 / 60.0 / self.sample_rate_hz
    }

    pub fn path_length_um(&self) -> f64 {
        (self.samples + 1) as f64 * self.sample_spacing_um()
    }
}

/// Straight probe path: start point (µm) and direction (radians from the length axis).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPath {
    pub start: (f64, f64),
    pub angle_rad: f64,
}

impl SweepPath {
    pub fn point(&self, s: f64) -> (f64, f64) {
        (self.start.0 + s * self.angle_rad.cos(), self.start.1 + s * self.angle_rad.sin())
    }
}

/// Random path that fits inside the field with a small margin.
pub fn random_path(field: &HeightField, cfg: &SweepConfig, rng: &mut Rng) -> Result<SweepPath> {
    let jitter = if cfg.angle_jitter_deg > 0.0 {
        rng.random_range(-cfg.angle_jitter_deg..cfg.angle_jitter_deg)
    } else {
        0.0
    };
    let angle = (cfg.angle_deg + jitter).to_radians();
    let len = cfg.path_length_um() + 2.0 * cfg.sample_spacing_um();
    let (dx, dy) = (len * angle.cos(), len * angle.sin());
    let margin = 10.0;
    let range = |extent: f64, d: f64| -> Result<(f64, f64)> {
        let lo = margin + (-d).max(0.0);
        let hi = extent - margin - d.max(0.0);
        if hi <= lo {
            return Err(Error::Parameter(format!("a {len:.0} µm sweep does not fit the field")));
        }
        Ok((lo, hi))
    };
    let (x0, x1) = range(field.extent_um.0, dx)?;
    let (y0, y1) = range(field.extent_um.1, dy)?;
    Ok(SweepPath {
        start: (rng.random_range(x0..x1), rng.random_range(y0..y1)),
        angle_rad: angle,
    })
}

/// Drags a probe along `path` and records accelerometer and pressure channels.
///
/// Stick-slip: the probe occasionally stalls for a random number of samples
/// while tangential load builds, then jumps back onto its nominal schedule.
pub fn simulate_sweep(field: &HeightField, path: &SweepPath, cfg: &SweepConfig, rng: &mut Rng) -> Result<TactileSweep> {
    if !(cfg.speed_mm_min > 0.0 && cfg.sample_rate_hz > 0.0) || cfg.samples == 0 {
        return Err(Error::Parameter("sweep speed, sample rate and length must be positive".into()));
    }
    let ds = cfg.sample_spacing_um();
    let t = cfg.samples;
    let first = path.point(-ds);
    let last = path.point(t as f64 * ds);
    if !field.contains(first.0, first.1) || !field.contains(last.0, last.1) {
        return Err(Error::Parameter(format!(
            "sweep from {first:?} to {last:?} leaves the {:?} µm field",
            field.extent_um
        )));
    }
    let contact = 1.0
        + if cfg.contact_jitter > 0.0 {
            rng.random_range(-cfg.contact_jitter..cfg.contact_jitter)
        } else {
            0.0
        };

    // positions for sample indices -1..=t
    let stall_prob = (0.02 * cfg.stick_slip_level).clamp(0.0, 1.0);
    let mut s = Vec::with_capacity(t + 2);
    let mut lag = Vec::with_capacity(t + 2);
    s.push(-ds);
    lag.push(0.0);
    let mut stall_left = 0usize;
    let mut held = 0.0;
    for k in 0..=t {
        let planned = k as f64 * ds;
        if stall_left == 0 && k > 0 && k < t && stall_prob > 0.0 && rng.random_bool(stall_prob) {
            stall_left = rng.random_range(3..=15);
            held = s[s.len() - 1];
        }
        let pos = if stall_left > 0 {
            stall_left -= 1;
            held
        } else {
            planned
        };
        s.push(pos);
        lag.push(planned - pos);
    }

    let (sin, cos) = path.angle_rad.sin_cos();
    let mut h = Vec::with_capacity(t + 2);
    let mut along = Vec::with_capacity(t + 2);
    let mut cross = Vec::with_capacity(t + 2);
    for &sk in &s {
        let (x, y) = path.point(sk);
        let (hk, (gx, gy)) = field.height_and_gradient(x, y);
        h.push(hk);
        along.push(gx * cos + gy * sin);
        cross.push(-gx * sin + gy * cos);
    }

    let mut samples = Vec::with_capacity(t);
    for k in 1..=t {
        let mut row = [
            ACCEL_ALONG_GAIN * (s[k + 1] - 2.0 * s[k] + s[k - 1]) / ds,
            ACCEL_LATERAL_GAIN * (cross[k + 1] - cross[k - 1]) / 2.0,
            ACCEL_VERTICAL_GAIN_UM * (h[k + 1] - 2.0 * h[k] + h[k - 1]) / (ds * ds),
            contact * (PRESSURE_SLOPE_GAIN * along[k] + cfg.stick_slip_level * STICK_LOAD_GAIN * lag[k] / ds),
            contact * PRESSURE_SLOPE_GAIN * cross[k],
            contact * (PRELOAD + PRESSURE_HEIGHT_GAIN * h[k]),
        ];
        if cfg.contact_noise > 0.0 {
            for v in &mut row {
                let z: f64 = StandardNormal.sample(rng);
                *v += cfg.contact_noise * z;
            }
        }
        samples.push(row);
    }
    Ok(TactileSweep {
        times: (0..t).map(|k| k as f64 / cfg.sample_rate_hz).collect(),
        samples,
    })
}
