//! Per-tile denoising with normalized weighted fusion, two-side fusion of a
//! forward and a backward chain, and the generation/interpolation pipelines
//! built on them.

use ndarray::{s, Array2, Array4};
use rayon::prelude::*;

use crate::adapter::{AdaptedModel, BaseDenoiser, ControlModule, EventEncoder};
use crate::codec::{decode, encode, CodecConfig, LatentVideo};
use crate::diffusion::{ddim_step, sample_noise, Denoiser, Latent, NoiseSchedule};
use crate::events::EventStream;
use crate::image::{area_downsample, bilinear_upsample, Image};
use crate::stacker::{build_control_sequence, StackerConfig};
use crate::{Error, Result};

/// One rectangle of the latent canvas, in latent units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tile {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

/// Overlapping tiles covering the canvas; row-major at a fixed stride with
/// the final row/column shifted inward.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileGrid {
    pub canvas_h: usize,
    pub canvas_w: usize,
    pub tiles: Vec<Tile>,
}

fn tile_starts(canvas: usize, tile: usize, step: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut pos = 0;
    loop {
        if pos + tile >= canvas {
            let last = canvas - tile;
            if starts.last() != Some(&last) {
                starts.push(last);
            }
            break;
        }
        starts.push(pos);
        pos += step;
    }
    starts
}

pub fn make_tile_grid(canvas: (usize, usize), tile: (usize, usize), overlap: usize) -> Result<TileGrid> {
    let (ch, cw) = canvas;
    let (th, tw) = tile;
    if th == 0 || tw == 0 {
        return Err(Error::Argument("tile size must be >= 1".into()));
    }
    if th > ch || tw > cw {
        return Err(Error::Argument(format!(
            "tile {th}x{tw} exceeds canvas {ch}x{cw}"
        )));
    }
    if overlap >= th || overlap >= tw {
        return Err(Error::Argument(format!(
            "overlap {overlap} must be smaller than the tile"
        )));
    }
    let mut tiles = Vec::new();
    for &y0 in &tile_starts(ch, th, th - overlap) {
        for &x0 in &tile_starts(cw, tw, tw - overlap) {
            tiles.push(Tile {
                y0,
                x0,
                h: th,
                w: tw,
            });
        }
    }
    Ok(TileGrid {
        canvas_h: ch,
        canvas_w: cw,
        tiles,
    })
}

/// Per-tile weight mask choice for fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TileWeighting {
    /// Equal weights: overlapping tiles are averaged.
    #[default]
    Uniform,
    /// Linear ramp toward tile borders, softening seams.
    Feathered,
}

impl TileWeighting {
    pub fn weight_map(&self, h: usize, w: usize) -> Array2<f64> {
        match self {
            TileWeighting::Uniform => Array2::ones((h, w)),
            TileWeighting::Feathered => Array2::from_shape_fn((h, w), |(y, x)| {
                let dy = (y + 1).min(h - y);
                let dx = (x + 1).min(w - x);
                dy.min(dx) as f64
            }),
        }
    }
}

/// Normalized weighted accumulation of per-tile latents with explicit weight
/// maps: each canvas cell gets the weight-normalized sum over covering tiles,
/// so cells covered by one tile pass through unchanged.
pub fn fuse_tiles_with(
    tile_latents: &[Latent],
    grid: &TileGrid,
    weight_maps: &[Array2<f64>],
) -> Result<Latent> {
    if tile_latents.len() != grid.tiles.len() || weight_maps.len() != grid.tiles.len() {
        return Err(Error::Argument(format!(
            "{} tiles but {} latents and {} weight maps",
            grid.tiles.len(),
            tile_latents.len(),
            weight_maps.len()
        )));
    }
    if grid.tiles.is_empty() {
        return Err(Error::Argument("empty tile grid".into()));
    }
    let (nf, c, _, _) = tile_latents[0].dim();
    let mut num = Array4::zeros((nf, c, grid.canvas_h, grid.canvas_w));
    let mut den = Array2::<f64>::zeros((grid.canvas_h, grid.canvas_w));
    for ((tile, latent), wmap) in grid.tiles.iter().zip(tile_latents).zip(weight_maps) {
        if latent.dim() != (nf, c, tile.h, tile.w) {
            return Err(Error::Argument(format!(
                "tile latent shape {:?} does not match tile {}x{}",
                latent.dim(),
                tile.h,
                tile.w
            )));
        }
        if wmap.dim() != (tile.h, tile.w) {
            return Err(Error::Weight("weight map shape does not match tile".into()));
        }
        if wmap.iter().any(|&v| v < 0.0) {
            return Err(Error::Weight("tile weights must be non-negative".into()));
        }
        if tile.y0 + tile.h > grid.canvas_h || tile.x0 + tile.w > grid.canvas_w {
            return Err(Error::Argument("tile extends past the canvas".into()));
        }
        for f in 0..nf {
            for ch in 0..c {
                let mut dst = num.slice_mut(s![
                    f,
                    ch,
                    tile.y0..tile.y0 + tile.h,
                    tile.x0..tile.x0 + tile.w
                ]);
                ndarray::Zip::from(&mut dst)
                    .and(&latent.slice(s![f, ch, .., ..]))
                    .and(wmap)
                    .for_each(|d, &v, &wt| *d += wt * v);
            }
        }
        let mut dd = den.slice_mut(s![tile.y0..tile.y0 + tile.h, tile.x0..tile.x0 + tile.w]);
        dd += wmap;
    }
    if let Some(((y, x), _)) = den.indexed_iter().find(|(_, &v)| v <= 0.0) {
        return Err(Error::Weight(format!(
            "zero total weight at canvas cell ({y}, {x})"
        )));
    }
    for f in 0..nf {
        for ch in 0..c {
            let mut plane = num.slice_mut(s![f, ch, .., ..]);
            ndarray::Zip::from(&mut plane).and(&den).for_each(|v, &d| *v /= d);
        }
    }
    Ok(num)
}

/// Fusion with the configured weighting applied to every tile.
pub fn fuse_tiles(tile_latents: &[Latent], grid: &TileGrid, weighting: TileWeighting) -> Result<Latent> {
    let maps: Vec<Array2<f64>> =
        grid.tiles.iter().map(|t| weighting.weight_map(t.h, t.w)).collect();
    fuse_tiles_with(tile_latents, grid, &maps)
}

fn crop(z: &Latent, tile: &Tile) -> Latent {
    z.slice(s![
        ..,
        ..,
        tile.y0..tile.y0 + tile.h,
        tile.x0..tile.x0 + tile.w
    ])
    .as_standard_layout()
    .to_owned()
}

/// One tiled denoising step: crop the latent and both conditioning tensors
/// per tile, predict noise and take a deterministic sampler step on each
/// tile, then fuse the tile results.
pub fn per_tile_evds(
    denoiser: &dyn Denoiser,
    z: &Latent,
    k: usize,
    i_cond: &Latent,
    e_cond: &Latent,
    schedule: &NoiseSchedule,
    grid: &TileGrid,
    weighting: TileWeighting,
) -> Result<Latent> {
    let (nf, _, h, w) = z.dim();
    if (h, w) != (grid.canvas_h, grid.canvas_w) {
        return Err(Error::Argument(format!(
            "latent canvas {h}x{w} does not match grid {}x{}",
            grid.canvas_h, grid.canvas_w
        )));
    }
    if i_cond.dim() != z.dim() {
        return Err(Error::Argument("conditioning latent shape mismatch".into()));
    }
    if (e_cond.dim().0, e_cond.dim().2, e_cond.dim().3) != (nf, h, w) {
        return Err(Error::Argument("event tensor must share the latent grid".into()));
    }
    let stepped: Vec<Result<Latent>> = grid
        .tiles
        .par_iter()
        .map(|tile| {
            let zt = crop(z, tile);
            let it = crop(i_cond, tile);
            let et = crop(e_cond, tile);
            let eps = denoiser.predict_noise(&zt, k, &it, &et);
            ddim_step(&zt, &eps, k, schedule)
        })
        .collect();
    let tiles: Vec<Latent> = stepped.into_iter().collect::<Result<_>>()?;
    fuse_tiles(&tiles, grid, weighting)
}

/// Reverse the frame order.
pub fn flip_temporal(z: &Latent) -> Latent {
    z.slice(s![..;-1, .., .., ..]).as_standard_layout().to_owned()
}

/// Orientation of the per-frame fusion weights applied to the forward chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionOrientation {
    /// Forward weight 1 at the first frame, 0 at the last: frames near the
    /// start follow the start-conditioned branch.
    #[default]
    StartHeavy,
    /// The transposed convention: forward weight 0 at the first frame.
    EndHeavy,
}

/// Linear per-frame weights for the forward chain.
pub fn frame_weights(frames: usize, orientation: FusionOrientation) -> Vec<f64> {
    if frames == 1 {
        return vec![1.0];
    }
    (0..frames)
        .map(|f| {
            let ramp = f as f64 / (frames - 1) as f64;
            match orientation {
                FusionOrientation::StartHeavy => 1.0 - ramp,
                FusionOrientation::EndHeavy => ramp,
            }
        })
        .collect()
}

/// Per-frame convex combination of the forward chain and the temporally
/// flipped backward chain: `out[f] = w[f] * zs[f] + (1 - w[f]) * ze[F-1-f]`.
/// `ze` is passed in backward frame order; the flip happens here.
pub fn two_side_fuse(zs: &Latent, ze: &Latent, wf: &[f64]) -> Result<Latent> {
    if zs.dim() != ze.dim() {
        return Err(Error::Argument(format!(
            "branch shapes differ: {:?} vs {:?}",
            zs.dim(),
            ze.dim()
        )));
    }
    let nf = zs.dim().0;
    if wf.len() != nf {
        return Err(Error::Argument(format!(
            "{} frame weights for {nf} frames",
            wf.len()
        )));
    }
    if wf.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
        return Err(Error::Weight("frame weights must lie in [0, 1]".into()));
    }
    let flipped = flip_temporal(ze);
    let mut out = zs.clone();
    for f in 0..nf {
        let w = wf[f];
        let mut dst = out.slice_mut(s![f, .., .., ..]);
        ndarray::Zip::from(&mut dst)
            .and(&flipped.slice(s![f, .., .., ..]))
            .for_each(|o, &b| *o = w * *o + (1.0 - w) * b);
    }
    Ok(out)
}

/// Trained model handles plus the schedule they were trained against.
pub struct PipelineModel<'a> {
    pub base: &'a BaseDenoiser,
    pub control: Option<&'a ControlModule>,
    pub schedule: &'a NoiseSchedule,
}

impl<'a> PipelineModel<'a> {
    fn denoiser(&self) -> AdaptedModel<'a> {
        AdaptedModel {
            base: self.base,
            branch: self.control.map(|c| &c.branch),
        }
    }

    fn encoder(&self) -> Option<&'a EventEncoder> {
        self.control.map(|c| &c.encoder)
    }
}

/// Sampling-time configuration shared by generation and interpolation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub codec: CodecConfig,
    pub stacker: StackerConfig,
    /// Tile side in latent units.
    pub tile: usize,
    pub overlap: usize,
    /// Output frames per span.
    pub frames: usize,
    pub seed: u64,
    pub weighting: TileWeighting,
    pub orientation: FusionOrientation,
    /// Polarity inversion when deriving backward events.
    pub invert_backward_polarity: bool,
    /// Constant forward weight replacing the linear ramp; 1.0 makes
    /// interpolation ignore the backward branch entirely.
    pub forward_weight_override: Option<f64>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            codec: CodecConfig::default(),
            stacker: StackerConfig::default(),
            tile: 16,
            overlap: 8,
            frames: 8,
            seed: 0,
            weighting: TileWeighting::Uniform,
            orientation: FusionOrientation::StartHeavy,
            invert_backward_polarity: true,
            forward_weight_override: None,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        if self.frames < 2 {
            return Err(Error::Config("need at least 2 output frames".into()));
        }
        if self.tile == 0 {
            return Err(Error::Config("tile size must be >= 1".into()));
        }
        if self.overlap >= self.tile {
            return Err(Error::Config("overlap must be smaller than the tile".into()));
        }
        if let Some(w) = self.forward_weight_override {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Config("forward weight override must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    fn wf(&self) -> Vec<f64> {
        match self.forward_weight_override {
            Some(w) => vec![w; self.frames],
            None => frame_weights(self.frames, self.orientation),
        }
    }
}

/// Upsample a keyframe, encode it, and rescale to the diffusion range
/// `2x - 1`.
fn encode_keyframe(image: &Image, codec: &CodecConfig) -> Result<LatentVideo> {
    let up = bilinear_upsample(image, codec.upsample);
    let mut lat = encode(std::slice::from_ref(&up), codec)?;
    lat.data.mapv_inplace(|v| 2.0 * v - 1.0);
    Ok(lat)
}

fn repeat_frames(single: &Latent, frames: usize) -> Latent {
    let (_, c, h, w) = single.dim();
    let mut out = Array4::zeros((frames, c, h, w));
    for f in 0..frames {
        out.slice_mut(s![f, .., .., ..]).assign(&single.slice(s![0, .., .., ..]));
    }
    out
}

/// Build the encoded event tensor for one branch. Without a control module
/// the tensor is an all-zero placeholder that the plain base ignores.
fn event_latent(
    events: &EventStream,
    frame_times: &[u64],
    cfg: &SamplingConfig,
    encoder: Option<&EventEncoder>,
    latent_hw: (usize, usize),
) -> Result<Latent> {
    let frames = frame_times.len();
    let Some(encoder) = encoder else {
        return Ok(Array4::zeros((frames, 1, latent_hw.0, latent_hw.1)));
    };
    let stacks = build_control_sequence(events, frame_times, &cfg.stacker)?;
    let (sc, h, w) = stacks[0].dim();
    let mut raw = Array4::zeros((frames, sc, h, w));
    for (f, st) in stacks.iter().enumerate() {
        raw.slice_mut(s![f, .., .., ..]).assign(st);
    }
    let (e_cond, _) = encoder.forward(&raw);
    let got = (e_cond.dim().2, e_cond.dim().3);
    if got != latent_hw {
        return Err(Error::Config(format!(
            "event encoder output {}x{} does not match the latent canvas {}x{}; \
             check encoder_downsample against codec d and upsample",
            got.0, got.1, latent_hw.0, latent_hw.1
        )));
    }
    Ok(e_cond)
}

fn check_frame_times(frame_times: &[u64], frames: usize) -> Result<()> {
    if frame_times.len() != frames {
        return Err(Error::Argument(format!(
            "{} frame times for {frames} frames",
            frame_times.len()
        )));
    }
    if frame_times.windows(2).any(|p| p[0] >= p[1]) {
        return Err(Error::Ordering("frame times must be strictly increasing".into()));
    }
    Ok(())
}

/// Decode a diffusion-range latent back to clamped images at the original
/// (pre-upsample) resolution.
fn decode_frames(z: &Latent, reference: &LatentVideo, codec: &CodecConfig) -> Result<Vec<Image>> {
    let video = LatentVideo {
        data: z.mapv(|v| (v + 1.0) / 2.0),
        orig_h: reference.orig_h,
        orig_w: reference.orig_w,
    };
    let upscaled = decode(&video, codec)?;
    upscaled
        .iter()
        .map(|frame| {
            let mut img = area_downsample(frame, codec.upsample)?;
            img.mapv_inplace(|v| v.clamp(0.0, 1.0));
            Ok(img)
        })
        .collect()
}

fn sampling_context(
    cfg: &SamplingConfig,
    start: &Image,
    frame_times: &[u64],
) -> Result<(TileGrid, Latent)> {
    use rand::SeedableRng;
    cfg.validate()?;
    check_frame_times(frame_times, cfg.frames)?;
    let lat = encode_keyframe(start, &cfg.codec)?;
    let (_, c, lh, lw) = lat.data.dim();
    let grid = make_tile_grid((lh, lw), (cfg.tile.min(lh), cfg.tile.min(lw)), cfg.overlap)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let z0 = sample_noise((cfg.frames, c, lh, lw), &mut rng);
    Ok((grid, z0))
}

/// Generate `F` frames forward from the start keyframe under event guidance.
pub fn generate(
    model: &PipelineModel,
    cfg: &SamplingConfig,
    start: &Image,
    events: &EventStream,
    frame_times: &[u64],
) -> Result<Vec<Image>> {
    let (grid, mut z) = sampling_context(cfg, start, frame_times)?;
    let lat_s = encode_keyframe(start, &cfg.codec)?;
    let (lh, lw) = (lat_s.data.dim().2, lat_s.data.dim().3);
    let i_cond = repeat_frames(&lat_s.data, cfg.frames);
    let e_cond = event_latent(events, frame_times, cfg, model.encoder(), (lh, lw))?;
    let den = model.denoiser();
    for k in (1..=model.schedule.n_steps()).rev() {
        z = per_tile_evds(&den, &z, k, &i_cond, &e_cond, model.schedule, &grid, cfg.weighting)?;
    }
    decode_frames(&z, &lat_s, &cfg.codec)
}

/// Interpolate `F` frames between two keyframes: a shared latent chain whose
/// forward branch is conditioned on the start frame and forward events, and
/// whose backward branch runs on the flipped latent conditioned on the end
/// frame and time-reversed events, merged each step by two-side fusion.
pub fn interpolate(
    model: &PipelineModel,
    cfg: &SamplingConfig,
    start: &Image,
    end: &Image,
    events: &EventStream,
    frame_times: &[u64],
) -> Result<Vec<Image>> {
    if start.dim() != end.dim() {
        return Err(Error::Argument("keyframe shapes differ".into()));
    }
    let (grid, mut z) = sampling_context(cfg, start, frame_times)?;
    let lat_s = encode_keyframe(start, &cfg.codec)?;
    let lat_e = encode_keyframe(end, &cfg.codec)?;
    let (lh, lw) = (lat_s.data.dim().2, lat_s.data.dim().3);
    let i_cond_f = repeat_frames(&lat_s.data, cfg.frames);
    let i_cond_b = repeat_frames(&lat_e.data, cfg.frames);
    let e_cond_f = event_latent(events, frame_times, cfg, model.encoder(), (lh, lw))?;
    let pivot = *frame_times.last().expect("nonempty");
    let reversed = events.reverse_time(pivot, cfg.invert_backward_polarity)?;
    let back_times: Vec<u64> = frame_times.iter().rev().map(|&t| pivot - t).collect();
    let e_cond_b = event_latent(&reversed, &back_times, cfg, model.encoder(), (lh, lw))?;
    let wf = cfg.wf();
    let den = model.denoiser();
    for k in (1..=model.schedule.n_steps()).rev() {
        let zs = per_tile_evds(&den, &z, k, &i_cond_f, &e_cond_f, model.schedule, &grid, cfg.weighting)?;
        let zb = flip_temporal(&z);
        let ze = per_tile_evds(&den, &zb, k, &i_cond_b, &e_cond_b, model.schedule, &grid, cfg.weighting)?;
        z = two_side_fuse(&zs, &ze, &wf)?;
    }
    decode_frames(&z, &lat_s, &cfg.codec)
}
