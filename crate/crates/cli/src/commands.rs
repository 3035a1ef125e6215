//! Subcommand implementations.
//!
//! Checkpoints are written as `<stem>.json` / `<stem>.bin` pairs with a
//! `<stem>.run.json` sidecar holding the run configuration, which the
//! sampling commands check against their own configuration before decoding
//! anything.

use std::path::{Path, PathBuf};

use evdi_core::adapter::{
    adapt_steps, load_checkpoint, param_hash, pretrain_base, pretrain_steps, save_checkpoint,
    train_adapter, Adam, CheckpointData, LossPoint,
};
use evdi_core::codec::{encode, CodecConfig};
use evdi_core::diffusion::Latent;
use evdi_core::fusion::{flip_temporal, generate, interpolate, PipelineModel, SamplingConfig};
use evdi_core::image::{bilinear_upsample, read_pgm, write_pgm, Image};
use evdi_core::metrics::{evaluate_clip, write_csv_summary, EvalReport};
use evdi_core::simulator::{
    make_clip, read_dataset, span_frame_indices, write_dataset, DatasetClip, ObjectSpec,
    SceneSpec, Shape, Trajectory,
};
use evdi_core::stacker::build_control_sequence;
use evdi_core::{Error, Result};
use ndarray::{s, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;

fn mix(a: u64, b: u64) -> u64 {
    let mut x = a ^ b.wrapping_mul(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Draw one random scene for a clip index. Speeds are capped below the
/// rasterizer's one-pixel-per-step limit.
pub fn scene_for_clip(cfg: &RunConfig, clip: usize) -> Result<SceneSpec> {
    let ds = &cfg.dataset;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, clip as u64));
    let v_cap = 0.95 * ds.render_rate_hz;
    let mut objects = Vec::with_capacity(ds.objects_per_clip);
    for _ in 0..ds.objects_per_clip {
        let size = rng.gen_range(3.0..5.0);
        let intensity = rng.gen_range(0.05..0.35);
        let shape = match rng.gen_range(0u8..3) {
            0 => Shape::Disc,
            1 => Shape::Square,
            _ => Shape::TexturedPatch,
        };
        let margin = size + 1.0;
        let start = (
            rng.gen_range(margin..ds.width as f64 - 1.0 - margin),
            rng.gen_range(margin..ds.height as f64 - 1.0 - margin),
        );
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let trajectory = match rng.gen_range(0u8..3) {
            0 => {
                let speed = rng.gen_range(0.25..0.9) * v_cap;
                Trajectory::Linear {
                    start,
                    velocity: (speed * angle.cos(), speed * angle.sin()),
                }
            }
            1 => {
                // drift plus a transverse arc; drift and swing speeds sum
                // below the cap
                let speed = rng.gen_range(0.25..0.5) * v_cap;
                let duration_s = ds.duration_us as f64 / 1e6;
                let frequency_hz = 0.5 / duration_s;
                let amp_mag = rng.gen_range(0.1..0.4) * v_cap
                    / (2.0 * std::f64::consts::PI * frequency_hz);
                let (ux, uy) = (angle.cos(), angle.sin());
                Trajectory::Sinusoidal {
                    start,
                    velocity: (speed * ux, speed * uy),
                    amplitude: (-amp_mag * uy, amp_mag * ux),
                    frequency_hz,
                    phase: 0.0,
                }
            }
            _ => {
                let speed = rng.gen_range(0.25..0.9) * v_cap;
                Trajectory::Bounce {
                    start,
                    velocity: (speed * angle.cos(), speed * angle.sin()),
                }
            }
        };
        objects.push(ObjectSpec {
            shape,
            size,
            intensity,
            trajectory,
        });
    }
    let spec = SceneSpec {
        width: ds.width,
        height: ds.height,
        background: ds.background,
        objects,
        duration_us: ds.duration_us,
        render_rate_hz: ds.render_rate_hz,
        seed: mix(cfg.seed, 0x5ce0 ^ clip as u64),
    };
    spec.validate()?;
    Ok(spec)
}

pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut clips = Vec::with_capacity(cfg.dataset.clips);
    for i in 0..cfg.dataset.clips {
        let spec = scene_for_clip(cfg, i)?;
        let mut esim = cfg.dataset.esim;
        esim.seed = mix(cfg.seed, 0xe51e ^ i as u64);
        let clip = make_clip(&spec, &esim, cfg.dataset.skip, cfg.dataset.keyframes)?;
        println!(
            "clip {i}: {} rendered frames, {} keyframes, {} events",
            clip.ground_truth.len(),
            clip.keyframes.len(),
            clip.events.len()
        );
        clips.push(clip);
    }
    write_dataset(out, &clips)?;
    println!("wrote {} clips to {}", clips.len(), out.display());
    Ok(())
}

fn repeat_frame(single: ndarray::ArrayView3<f64>, frames: usize) -> Latent {
    let (c, h, w) = single.dim();
    let mut out = Array4::zeros((frames, c, h, w));
    for f in 0..frames {
        out.slice_mut(s![f, .., .., ..]).assign(&single);
    }
    out
}

/// Upsample and encode ground-truth frames into a diffusion-range latent.
fn encode_span(images: &[&Image], codec: &CodecConfig) -> Result<Latent> {
    let ups: Vec<Image> = images
        .iter()
        .map(|im| bilinear_upsample(im, codec.upsample))
        .collect();
    let mut lat = encode(&ups, codec)?;
    lat.data.mapv_inplace(|v| 2.0 * v - 1.0);
    Ok(lat.data)
}

fn stacks_to_array(stacks: &[ndarray::Array3<f64>]) -> Array4<f64> {
    let (c, h, w) = stacks[0].dim();
    let mut out = Array4::zeros((stacks.len(), c, h, w));
    for (f, st) in stacks.iter().enumerate() {
        out.slice_mut(s![f, .., .., ..]).assign(st);
    }
    out
}

/// Frame times and rendered-frame indices of one keyframe span.
fn span_times(clip: &DatasetClip, span: usize, frames: usize) -> Result<(Vec<usize>, Vec<u64>)> {
    let spans = clip.keyframes.len() - 1;
    if span >= spans {
        return Err(Error::Argument(format!(
            "span {span} out of range, clip has {spans} keyframe spans"
        )));
    }
    let base = span * (clip.skip + 1);
    let idxs: Vec<usize> = span_frame_indices(clip.skip, frames)
        .into_iter()
        .map(|r| base + r)
        .collect();
    let times = idxs.iter().map(|&i| clip.gt_times[i]).collect();
    Ok((idxs, times))
}

/// Build training samples from every keyframe span of every clip. With
/// events enabled each span also contributes its time-reversed counterpart
/// so adaptation sees the backward branch's statistics.
fn build_samples(
    clips: &[DatasetClip],
    cfg: &RunConfig,
    with_events: bool,
) -> Result<Vec<evdi_core::adapter::TrainSample>> {
    let frames = cfg.sampling.frames;
    let codec = &cfg.sampling.codec;
    let mut samples = Vec::new();
    for clip in clips {
        for span in 0..clip.keyframes.len() - 1 {
            let (idxs, times) = span_times(clip, span, frames)?;
            let images: Vec<&Image> = idxs.iter().map(|&i| &clip.ground_truth[i]).collect();
            let x0 = encode_span(&images, codec)?;
            let i_cond = repeat_frame(x0.slice(s![0, .., .., ..]), frames);
            let (h, w) = (
                clip.spec.height as usize,
                clip.spec.width as usize,
            );
            if !with_events {
                samples.push(evdi_core::adapter::TrainSample {
                    x0,
                    i_cond,
                    stacks: Array4::zeros((frames, cfg.denoiser.stack_channels, h, w)),
                });
                continue;
            }
            let span_events = clip.events.slice(times[0], *times.last().unwrap())?;
            let stacks = stacks_to_array(&build_control_sequence(
                &span_events,
                &times,
                &cfg.sampling.stacker,
            )?);
            let pivot = *times.last().unwrap();
            let reversed =
                span_events.reverse_time(pivot, cfg.sampling.invert_backward_polarity)?;
            let back_times: Vec<u64> = times.iter().rev().map(|&t| pivot - t).collect();
            let back_stacks = stacks_to_array(&build_control_sequence(
                &reversed,
                &back_times,
                &cfg.sampling.stacker,
            )?);
            let x0_b = flip_temporal(&x0);
            let i_cond_b = repeat_frame(x0_b.slice(s![0, .., .., ..]), frames);
            samples.push(evdi_core::adapter::TrainSample { x0, i_cond, stacks });
            samples.push(evdi_core::adapter::TrainSample {
                x0: x0_b,
                i_cond: i_cond_b,
                stacks: back_stacks,
            });
        }
    }
    Ok(samples)
}

fn append_loss_csv(stem: &Path, curve: &[LossPoint]) -> Result<()> {
    let path = stem.with_extension("loss.csv");
    let mut text = if path.exists() {
        std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?
    } else {
        String::from("step,loss\n")
    };
    for p in curve {
        text.push_str(&format!("{},{}\n", p.step, p.loss));
    }
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn write_sidecar(stem: &Path, cfg: &RunConfig) -> Result<()> {
    let path = sidecar_path(stem);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(&path, serde_json::to_vec_pretty(cfg)?).map_err(|e| Error::io(&path, e))
}

fn sidecar_path(stem: &Path) -> PathBuf {
    stem.with_extension("run.json")
}

/// Refuse to sample with a configuration the checkpoint was not trained
/// for: schedule length, frame count, and the data-path geometry must match
/// the sidecar written at training time.
fn check_sidecar(stem: &Path, cfg: &RunConfig) -> Result<()> {
    let path = sidecar_path(stem);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let trained: RunConfig = serde_json::from_str(&text)?;
    let pairs: [(&str, bool); 5] = [
        (
            "schedule",
            trained.schedule == cfg.schedule,
        ),
        ("denoiser", trained.denoiser == cfg.denoiser),
        (
            "sampling.frames",
            trained.sampling.frames == cfg.sampling.frames,
        ),
        (
            "sampling.codec",
            trained.sampling.codec == cfg.sampling.codec,
        ),
        (
            "sampling.stacker",
            trained.sampling.stacker == cfg.sampling.stacker,
        ),
    ];
    for (name, ok) in pairs {
        if !ok {
            return Err(Error::Config(format!(
                "{name} in the current config differs from the one this checkpoint was \
                 trained with ({})",
                path.display()
            )));
        }
    }
    Ok(())
}

fn checkpoint_exists(stem: &Path) -> bool {
    stem.with_extension("json").exists() && stem.with_extension("bin").exists()
}

pub fn cmd_pretrain(cfg: &RunConfig, data: &Path, out_stem: &Path, resume: bool) -> Result<()> {
    let clips = read_dataset(data)?;
    let samples = build_samples(&clips, cfg, false)?;
    let schedule = cfg.schedule.build()?;
    let target = cfg.pretrain.steps;
    let mut tc = cfg.pretrain;
    tc.seed = cfg.seed;

    let (base, opt, curve, completed) = if resume {
        if !checkpoint_exists(out_stem) {
            return Err(Error::Argument(format!(
                "cannot resume: no checkpoint at {}",
                out_stem.display()
            )));
        }
        let lc = load_checkpoint(out_stem)?;
        let (t, m, v) = lc.base_opt_state.ok_or_else(|| {
            Error::Checkpoint("checkpoint lacks base optimizer state, cannot resume".into())
        })?;
        let mut base = lc.base;
        let mut opt = Adam::from_state(tc.lr, t, m, v)?;
        let done = lc.completed_steps;
        if done >= target {
            println!("already at {done} steps, nothing to do");
            return Ok(());
        }
        tc.steps = target - done;
        let curve = pretrain_steps(&mut base, &mut opt, &samples, &schedule, &tc, done)?;
        (base, opt, curve, target)
    } else {
        tc.steps = target;
        let (base, opt, curve) = pretrain_base(&cfg.denoiser, &samples, &schedule, &tc)?;
        (base, opt, curve, target)
    };

    save_checkpoint(
        out_stem,
        &CheckpointData {
            base: &base,
            control: None,
            schedule: &schedule,
            stage: "base",
            completed_steps: completed,
            base_opt: Some(&opt),
            control_opt: None,
        },
    )?;
    write_sidecar(out_stem, cfg)?;
    append_loss_csv(out_stem, &curve)?;
    if let Some(last) = curve.last() {
        println!("pretrained to step {} (loss {:.6})", last.step, last.loss);
    }
    println!("base parameter hash {}", param_hash(&base));
    Ok(())
}

pub fn cmd_adapt(
    cfg: &RunConfig,
    data: &Path,
    base_stem: &Path,
    out_stem: &Path,
    resume: bool,
) -> Result<()> {
    if !checkpoint_exists(base_stem) {
        return Err(Error::Argument(format!(
            "adaptation needs a pretrained base checkpoint, none found at {}",
            base_stem.display()
        )));
    }
    let clips = read_dataset(data)?;
    let samples = build_samples(&clips, cfg, true)?;
    let lc = load_checkpoint(base_stem)?;
    let base = lc.base;
    let schedule = lc.schedule;
    if schedule.n_steps() != cfg.schedule.n_steps {
        return Err(Error::Config(format!(
            "schedule.n_steps {} does not match the {} steps the base was trained with",
            cfg.schedule.n_steps,
            schedule.n_steps()
        )));
    }
    let hash_before = param_hash(&base);
    println!("base parameter hash before adaptation {hash_before}");

    let target = cfg.adapt.steps;
    let mut tc = cfg.adapt;
    tc.seed = mix(cfg.seed, 0xada8);

    let (module, opt, curve, completed) = if resume {
        let rc = load_checkpoint(out_stem)?;
        let mut module = rc.control.ok_or_else(|| {
            Error::Checkpoint("checkpoint holds no control module, cannot resume adaptation".into())
        })?;
        let (t, m, v) = rc.control_opt_state.ok_or_else(|| {
            Error::Checkpoint("checkpoint lacks control optimizer state, cannot resume".into())
        })?;
        let mut opt = Adam::from_state(tc.lr, t, m, v)?;
        let done = rc.completed_steps;
        if done >= target {
            println!("already at {done} steps, nothing to do");
            return Ok(());
        }
        tc.steps = target - done;
        let curve = adapt_steps(&base, &mut module, &mut opt, &samples, &schedule, &tc, done)?;
        (module, opt, curve, target)
    } else {
        tc.steps = target;
        let (module, opt, curve) = train_adapter(&base, &samples, &schedule, &tc)?;
        (module, opt, curve, target)
    };

    let hash_after = param_hash(&base);
    println!("base parameter hash after adaptation  {hash_after}");
    save_checkpoint(
        out_stem,
        &CheckpointData {
            base: &base,
            control: Some(&module),
            schedule: &schedule,
            stage: "adapted",
            completed_steps: completed,
            base_opt: None,
            control_opt: Some(&opt),
        },
    )?;
    write_sidecar(out_stem, cfg)?;
    append_loss_csv(out_stem, &curve)?;
    if let Some(last) = curve.last() {
        println!("adapted to step {} (loss {:.6})", last.step, last.loss);
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct OutputManifest<'a> {
    command: &'a str,
    checkpoint: String,
    data: String,
    clip: usize,
    span: usize,
    frames: usize,
    seed: u64,
    frame_times: Vec<u64>,
    sampling: &'a SamplingConfig,
}

fn load_clip(data: &Path, clip: usize) -> Result<DatasetClip> {
    let mut clips = read_dataset(data)?;
    if clip >= clips.len() {
        return Err(Error::Argument(format!(
            "clip {clip} out of range, dataset holds {} clips",
            clips.len()
        )));
    }
    Ok(clips.swap_remove(clip))
}

fn write_frames(out: &Path, frames: &[Image], manifest: &OutputManifest) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (i, f) in frames.iter().enumerate() {
        write_pgm(&out.join(format!("frame_{i:04}.pgm")), f)?;
    }
    let mpath = out.join("manifest.json");
    std::fs::write(&mpath, serde_json::to_vec_pretty(manifest)?).map_err(|e| Error::io(&mpath, e))
}

#[allow(clippy::too_many_arguments)]
fn run_sampling(
    cfg: &RunConfig,
    ckpt_stem: &Path,
    data: &Path,
    clip_idx: usize,
    span: usize,
    out: &Path,
    two_sided: bool,
) -> Result<()> {
    if !checkpoint_exists(ckpt_stem) {
        return Err(Error::Argument(format!(
            "no checkpoint at {}",
            ckpt_stem.display()
        )));
    }
    check_sidecar(ckpt_stem, cfg)?;
    let lc = load_checkpoint(ckpt_stem)?;
    let clip = load_clip(data, clip_idx)?;
    let (idxs, times) = span_times(&clip, span, cfg.sampling.frames)?;
    let span_events = clip.events.slice(times[0], *times.last().unwrap())?;
    let model = PipelineModel {
        base: &lc.base,
        control: lc.control.as_ref(),
        schedule: &lc.schedule,
    };
    let start = &clip.ground_truth[idxs[0]];
    let frames = if two_sided {
        let end = &clip.ground_truth[*idxs.last().unwrap()];
        interpolate(&model, &cfg.sampling, start, end, &span_events, &times)?
    } else {
        generate(&model, &cfg.sampling, start, &span_events, &times)?
    };
    let manifest = OutputManifest {
        command: if two_sided { "interpolate" } else { "generate" },
        checkpoint: ckpt_stem.display().to_string(),
        data: data.display().to_string(),
        clip: clip_idx,
        span,
        frames: frames.len(),
        seed: cfg.sampling.seed,
        frame_times: times,
        sampling: &cfg.sampling,
    };
    write_frames(out, &frames, &manifest)?;
    println!(
        "wrote {} frames to {} ({}, control module {})",
        frames.len(),
        out.display(),
        manifest.command,
        if lc.control.is_some() { "present" } else { "absent" }
    );
    Ok(())
}

pub fn cmd_generate(
    cfg: &RunConfig,
    ckpt: &Path,
    data: &Path,
    clip: usize,
    span: usize,
    out: &Path,
) -> Result<()> {
    run_sampling(cfg, ckpt, data, clip, span, out, false)
}

pub fn cmd_interpolate(
    cfg: &RunConfig,
    ckpt: &Path,
    data: &Path,
    clip: usize,
    span: usize,
    out: &Path,
) -> Result<()> {
    run_sampling(cfg, ckpt, data, clip, span, out, true)
}

pub fn cmd_evaluate(
    cfg: &RunConfig,
    data: &Path,
    pred: &Path,
    clip_idx: usize,
    span: usize,
    out: &Path,
) -> Result<()> {
    let clip = load_clip(data, clip_idx)?;
    let (idxs, _) = span_times(&clip, span, cfg.sampling.frames)?;
    let mut predicted = Vec::with_capacity(idxs.len());
    for i in 0..idxs.len() {
        let path = pred.join(format!("frame_{i:04}.pgm"));
        if !path.exists() {
            return Err(Error::Argument(format!(
                "predicted frame missing: {}",
                path.display()
            )));
        }
        predicted.push(read_pgm(&path)?);
    }
    let reference: Vec<Image> = idxs.iter().map(|&i| clip.ground_truth[i].clone()).collect();
    let indices: Vec<usize> = match &cfg.evaluate.indices {
        Some(list) => list.clone(),
        None => (0..idxs.len()).collect(),
    };
    let report = evaluate_clip(
        &predicted,
        &reference,
        &indices,
        &cfg.sampling.codec,
        cfg.evaluate.roundtrip,
    )?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let jpath = out.join(format!("clip_{clip_idx:04}_span_{span}.json"));
    std::fs::write(&jpath, serde_json::to_vec_pretty(&report)?).map_err(|e| Error::io(&jpath, e))?;
    write_csv_summary(
        &out.join("summary.csv"),
        &[(format!("clip_{clip_idx:04}_span_{span}"), report.clone())],
    )?;
    print_report(&format!("clip {clip_idx} span {span}"), &report);
    Ok(())
}

fn print_report(label: &str, report: &EvalReport) {
    println!(
        "{label}: mean PSNR {:.2} dB, mean SSIM {:.4} over {} frames",
        report.mean_psnr,
        report.mean_ssim,
        report.frame_indices.len()
    );
}

/// End-to-end run in one working directory: simulate, pretrain, adapt,
/// interpolate the first span of the first clip, and score it.
pub fn cmd_reproduce(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = out.join("data");
    let base = out.join("ckpt").join("base");
    let adapted = out.join("ckpt").join("adapted");
    let pred = out.join("pred");
    let report = out.join("report");
    println!("== simulate ==");
    cmd_simulate(cfg, &data)?;
    println!("== pretrain ==");
    cmd_pretrain(cfg, &data, &base, false)?;
    println!("== adapt ==");
    cmd_adapt(cfg, &data, &base, &adapted, false)?;
    println!("== interpolate ==");
    cmd_interpolate(cfg, &adapted, &data, 0, 0, &pred)?;
    println!("== evaluate ==");
    cmd_evaluate(cfg, &data, &pred, 0, 0, &report)?;
    Ok(())
}
