//! Scene description and deterministic rasterization.

use ndarray::Array2;

use crate::image::{quantize_u8, Image};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Disc,
    Square,
    TexturedPatch,
}

/// Object trajectories. All positions are in pixels, velocities in px/s,
/// frequencies in Hz. `position(0)` always equals `start`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Trajectory {
    Linear {
        start: (f64, f64),
        velocity: (f64, f64),
    },
    /// Linear drift plus a sinusoidal offset; with a transverse amplitude
    /// this traces an arc between the same endpoints as the plain drift.
    Sinusoidal {
        start: (f64, f64),
        velocity: (f64, f64),
        amplitude: (f64, f64),
        frequency_hz: f64,
        phase: f64,
    },
    /// Linear motion reflected at the canvas borders.
    Bounce {
        start: (f64, f64),
        velocity: (f64, f64),
    },
}

impl Trajectory {
    /// Centre position at time `t` seconds, for an object of half-extent
    /// `size` on a `w x h` canvas.
    pub fn position(&self, t: f64, size: f64, w: f64, h: f64) -> (f64, f64) {
        match *self {
            Trajectory::Linear { start, velocity } => {
                (start.0 + velocity.0 * t, start.1 + velocity.1 * t)
            }
            Trajectory::Sinusoidal {
                start,
                velocity,
                amplitude,
                frequency_hz,
                phase,
            } => {
                let arg = 2.0 * std::f64::consts::PI * frequency_hz * t + phase;
                let base = phase.sin();
                (
                    start.0 + velocity.0 * t + amplitude.0 * (arg.sin() - base),
                    start.1 + velocity.1 * t + amplitude.1 * (arg.sin() - base),
                )
            }
            Trajectory::Bounce { start, velocity } => (
                reflect(start.0 + velocity.0 * t, size, w - 1.0 - size),
                reflect(start.1 + velocity.1 * t, size, h - 1.0 - size),
            ),
        }
    }

    /// Upper bound on the object speed in px/s.
    pub fn max_speed(&self) -> f64 {
        match *self {
            Trajectory::Linear { velocity, .. } | Trajectory::Bounce { velocity, .. } => {
                velocity.0.hypot(velocity.1)
            }
            Trajectory::Sinusoidal {
                velocity,
                amplitude,
                frequency_hz,
                ..
            } => {
                velocity.0.hypot(velocity.1)
                    + amplitude.0.hypot(amplitude.1)
                        * 2.0
                        * std::f64::consts::PI
                        * frequency_hz.abs()
            }
        }
    }
}

/// Fold a coordinate into `[lo, hi]` with mirror reflection.
fn reflect(v: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    let span = hi - lo;
    let m = (v - lo).rem_euclid(2.0 * span);
    lo + if m <= span { m } else { 2.0 * span - m }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    /// Radius (disc) or half-extent (square / patch) in pixels.
    pub size: f64,
    /// Flat intensity, or texture contrast centre for textured patches.
    pub intensity: f64,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SceneSpec {
    pub width: u16,
    pub height: u16,
    pub background: f64,
    pub objects: Vec<ObjectSpec>,
    pub duration_us: u64,
    pub render_rate_hz: f64,
    /// Seed for textured-patch texture lookup.
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.duration_us == 0 {
            return Err(Error::Argument("scene duration is zero".into()));
        }
        if self.render_rate_hz <= 0.0 {
            return Err(Error::Argument("render rate must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Argument("canvas is degenerate".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.size < 1.0 {
                return Err(Error::Argument(format!("object {i} smaller than 1 px")));
            }
            let per_step = o.trajectory.max_speed() / self.render_rate_hz;
            if per_step >= 1.0 {
                return Err(Error::Argument(format!(
                    "object {i} moves {per_step:.2} px per render step; raise render_rate_hz"
                )));
            }
        }
        Ok(())
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic texture lattice value in [0, 1].
fn texel(seed: u64, obj: usize, ix: i64, iy: i64) -> f64 {
    let mixed = splitmix(
        seed ^ (obj as u64).wrapping_mul(0x51ed2701)
            ^ (ix as u64).wrapping_mul(0x9e3779b9)
            ^ (iy as u64).wrapping_mul(0x85ebca6b),
    );
    (mixed >> 11) as f64 / (1u64 << 53) as f64
}

/// Bilinear sample of the texture lattice at object-relative coordinates.
fn texture_value(seed: u64, obj: usize, u: f64, v: f64) -> f64 {
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    texel(seed, obj, x0, y0) * (1.0 - fx) * (1.0 - fy)
        + texel(seed, obj, x0 + 1, y0) * fx * (1.0 - fy)
        + texel(seed, obj, x0, y0 + 1) * (1.0 - fx) * fy
        + texel(seed, obj, x0 + 1, y0 + 1) * fx * fy
}

/// Render the scene into quantized intensity frames plus microsecond
/// timestamps. Deterministic given the spec.
pub fn render_scene(spec: &SceneSpec) -> Result<(Vec<Image>, Vec<u64>)> {
    spec.validate()?;
    let step_us = 1.0e6 / spec.render_rate_hz;
    let n_frames = (spec.duration_us as f64 / step_us).round() as usize + 1;
    let (w, h) = (spec.width as usize, spec.height as usize);
    let mut frames = Vec::with_capacity(n_frames);
    let mut times = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let t_us = (i as f64 * step_us).round() as u64;
        let t_s = t_us as f64 * 1e-6;
        let mut frame = Array2::from_elem((h, w), spec.background);
        for (oi, obj) in spec.objects.iter().enumerate() {
            let (cx, cy) = obj.trajectory.position(
                t_s,
                obj.size,
                spec.width as f64,
                spec.height as f64,
            );
            paint(&mut frame, spec, oi, obj, cx, cy);
        }
        frames.push(quantize_u8(&frame));
        times.push(t_us);
    }
    Ok((frames, times))
}

fn paint(frame: &mut Image, spec: &SceneSpec, oi: usize, obj: &ObjectSpec, cx: f64, cy: f64) {
    let (h, w) = frame.dim();
    let r = obj.size;
    let y_lo = ((cy - r - 1.0).floor().max(0.0)) as usize;
    let y_hi = ((cy + r + 2.0).ceil().min(h as f64)) as usize;
    let x_lo = ((cx - r - 1.0).floor().max(0.0)) as usize;
    let x_hi = ((cx + r + 2.0).ceil().min(w as f64)) as usize;
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            // soft 1-px edge so sub-pixel motion produces graded changes
            let coverage = match obj.shape {
                Shape::Disc => (r + 0.5 - dx.hypot(dy)).clamp(0.0, 1.0),
                Shape::Square | Shape::TexturedPatch => {
                    (r + 0.5 - dx.abs().max(dy.abs())).clamp(0.0, 1.0)
                }
            };
            if coverage <= 0.0 {
                continue;
            }
            let value = match obj.shape {
                Shape::TexturedPatch => {
                    let tex = texture_value(spec.seed, oi, dx / 2.0, dy / 2.0);
                    (obj.intensity + 0.6 * (tex - 0.5)).clamp(0.0, 1.0)
                }
                _ => obj.intensity,
            };
            let cur = frame[[y, x]];
            frame[[y, x]] = cur * (1.0 - coverage) + value * coverage;
        }
    }
}
