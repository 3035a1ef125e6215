//! Contrast-threshold event camera model.
//!
//! Per pixel, a reference log-intensity is tracked; each time the log
//! intensity crosses another multiple of the contrast threshold, one event
//! is emitted with its timestamp linearly interpolated inside the
//! inter-frame interval, and the reference advances by the threshold.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::events::{EventRecord, EventStream};
use crate::image::Image;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct EsimConfig {
    /// Contrast threshold in log-intensity units.
    pub contrast: f64,
    /// Additive offset before the log to keep zeros finite.
    pub eps: f64,
    /// Optional uniform timestamp jitter in +-microseconds (0 disables).
    pub jitter_us: u64,
    pub seed: u64,
}

impl Default for EsimConfig {
    fn default() -> Self {
        EsimConfig {
            contrast: 0.2,
            eps: 1e-3,
            jitter_us: 0,
            seed: 0,
        }
    }
}

/// Simulate events from a temporally dense frame sequence.
pub fn simulate_events(
    frames: &[Image],
    timestamps: &[u64],
    cfg: &EsimConfig,
) -> Result<EventStream> {
    if cfg.contrast <= 0.0 {
        return Err(Error::Argument("contrast threshold must be positive".into()));
    }
    if frames.len() != timestamps.len() {
        return Err(Error::Argument(format!(
            "{} frames but {} timestamps",
            frames.len(),
            timestamps.len()
        )));
    }
    if frames.is_empty() {
        return Err(Error::Argument("no frames".into()));
    }
    let (h, w) = frames[0].dim();
    if h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(Error::Argument("canvas exceeds sensor coordinate range".into()));
    }
    for f in frames {
        if f.dim() != (h, w) {
            return Err(Error::Argument("inconsistent frame dimensions".into()));
        }
    }

    let mut jitter_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut refs: Vec<f64> = frames[0].iter().map(|&v| (v + cfg.eps).ln()).collect();
    let mut records: Vec<EventRecord> = Vec::new();
    for i in 1..frames.len() {
        let (t0, t1) = (timestamps[i - 1] as f64, timestamps[i] as f64);
        for (idx, (&cur, reference)) in frames[i].iter().zip(refs.iter_mut()).enumerate() {
            let level = (cur + cfg.eps).ln();
            let delta = level - *reference;
            let n = (delta.abs() / cfg.contrast).floor() as u64;
            if n == 0 {
                continue;
            }
            let sign = delta.signum();
            let p: i8 = if sign > 0.0 { 1 } else { -1 };
            let (y, x) = (idx / w, idx % w);
            for j in 1..=n {
                let frac = (j as f64 * cfg.contrast) / delta.abs();
                let mut t = t0 + (t1 - t0) * frac;
                if cfg.jitter_us > 0 {
                    let jit = jitter_rng.gen_range(-(cfg.jitter_us as i64)..=cfg.jitter_us as i64);
                    t = (t + jit as f64).max(0.0);
                }
                records.push(EventRecord {
                    t: t.round() as u64,
                    x: x as u16,
                    y: y as u16,
                    p,
                });
            }
            *reference += n as f64 * cfg.contrast * sign;
        }
    }
    records.sort_by_key(|r| (r.t, r.y, r.x, r.p));
    EventStream::new(w as u16, h as u16, records)
}
