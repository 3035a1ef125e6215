//! Acceptance suite: ten numbered criteria covering the statistical,
//! algebraic, architectural, and end-to-end behavior of the pipeline. Each
//! test checks one criterion against the pinned tolerances below and prints
//! a single pass line.
//!
//! The end-to-end criteria share one trained fixture (three clips of a disc
//! crossing a canvas along different paths between identical endpoint
//! keyframes), built once behind a `Lazy`.

use evdi_core::adapter::{
    adapt_steps, param_hash, pretrain_base, train_adapter, zeroed, AdaptedModel, BaseDenoiser,
    ControlModule, DenoiserConfig, ParamTensors, TrainConfig, TrainSample,
};
use evdi_core::codec::{encode, upsampled_roundtrip_psnr, CodecConfig};
use evdi_core::diffusion::{
    ddim_step, forward_diffuse, oracle_predict_noise, sample_noise, Denoiser, GaussianOracle,
    Latent, NoiseSchedule, OracleDenoiser,
};
use evdi_core::events::{EventRecord, EventStream};
use evdi_core::fusion::{
    flip_temporal, fuse_tiles, generate, interpolate, make_tile_grid, per_tile_evds,
    FusionOrientation, PipelineModel, SamplingConfig, TileWeighting,
};
use evdi_core::image::{bilinear_upsample, Image};
use evdi_core::metrics::{psnr, ssim};
use evdi_core::simulator::{
    make_clip, span_frame_indices, DatasetClip, EsimConfig, ObjectSpec, SceneSpec, Shape,
    Trajectory,
};
use evdi_core::stacker::{build_control_sequence, build_multistack, StackerConfig};
use ndarray::{s, Array2, Array4};
use once_cell::sync::Lazy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// pinned tolerances
const MC_SIGMA_BAND: f64 = 3.0; // standard errors on Monte Carlo moments
const CHAIN_REL_TOL: f64 = 0.05; // sampler-chain moment error, relative
const EXACT_EPS: f64 = 1e-9; // algebraic identities
const PARTITION_EPS: f64 = 1e-12; // fusion weight normalization
const FD_STEP: f64 = 1e-4; // finite-difference step
const GRAD_REL_TOL: f64 = 1e-3; // gradient vs finite differences
const EVENT_GAIN_DB: f64 = 3.0; // event conditioning over both baselines
const CENTROID_TOL_PX: f64 = 2.0; // object position in the mid frame
const ENDPOINT_GAP_DB: f64 = 1.0; // endpoint fidelity below codec ceiling
const UPSAMPLE_GAIN_DB: f64 = 1.0; // pre-encode upsampling benefit
const PSNR_REF_DB: f64 = 48.13; // one-quantization-step reference value
const PSNR_REF_TOL: f64 = 0.01;

fn max_abs_diff(a: &Latent, b: &Latent) -> f64 {
    (a - b).iter().fold(0.0f64, |m, &v| m.max(v.abs()))
}

#[test]
fn criterion_01_forward_noising_statistics() {
    let schedule = NoiseSchedule::make(50, 1e-4, 0.2).unwrap();
    let x0 = Latent::from_elem((1, 1, 2, 2), 0.7);
    let k = 25;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut vals = Vec::new();
    for _ in 0..20_000 {
        let eps = sample_noise((1, 1, 2, 2), &mut rng);
        vals.extend(forward_diffuse(&x0, k, &eps, &schedule).unwrap());
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sigma = schedule.sigma(k);
    let se_mean = sigma / n.sqrt();
    let se_sd = sigma / (2.0 * n).sqrt();
    let mean_err = (mean - schedule.alpha(k) * 0.7).abs();
    let sd_err = (var.sqrt() - sigma).abs();
    assert!(
        mean_err < MC_SIGMA_BAND * se_mean,
        "mean off by {mean_err}, allowed {}",
        MC_SIGMA_BAND * se_mean
    );
    assert!(
        sd_err < MC_SIGMA_BAND * se_sd,
        "sd off by {sd_err}, allowed {}",
        MC_SIGMA_BAND * se_sd
    );
    println!("criterion 01 (forward noising statistics): PASS");
}

#[test]
fn criterion_02_closed_form_sampler_recovers_target_moments() {
    // a fine schedule keeps deterministic-sampler discretization error well
    // inside the tolerance
    let schedule = NoiseSchedule::make(500, 1e-5, 0.02).unwrap();
    let shape = (1, 1, 4, 4);
    let (mu, v) = (0.4, 0.09);
    let oracle =
        GaussianOracle::new(Latent::from_elem(shape, mu), Latent::from_elem(shape, v)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut vals = Vec::new();
    for _ in 0..1000 {
        let mut z = sample_noise(shape, &mut rng);
        for k in (1..=schedule.n_steps()).rev() {
            let eps = oracle_predict_noise(&z, k, &oracle, &schedule).unwrap();
            z = ddim_step(&z, &eps, k, &schedule).unwrap();
        }
        vals.extend(z);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!(
        (mean - mu).abs() / mu.abs() < CHAIN_REL_TOL,
        "chain mean {mean} vs {mu}"
    );
    assert!((var - v).abs() / v < CHAIN_REL_TOL, "chain var {var} vs {v}");
    println!("criterion 02 (sampler recovers target moments): PASS");
}

#[test]
fn criterion_03_exact_identities() {
    let schedule = NoiseSchedule::make(50, 1e-4, 0.2).unwrap();
    let shape = (3, 2, 8, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let z = sample_noise(shape, &mut rng);
    let eps = sample_noise(shape, &mut rng);

    // the deterministic step is algebraically invertible given the same
    // noise prediction
    for k in [1, 10, 25, 50] {
        let z_prev = ddim_step(&z, &eps, k, &schedule).unwrap();
        let (a_k, s_k) = (schedule.alpha(k), schedule.sigma(k));
        let (a_p, s_p) = (schedule.alpha(k - 1), schedule.sigma(k - 1));
        let x0_hat = (&z_prev - &(&eps * s_p)) / a_p;
        let z_rec = &x0_hat * a_k + &eps * s_k;
        assert!(max_abs_diff(&z_rec, &z) < EXACT_EPS, "inversion at k={k}");
    }

    // tile weights normalize to a partition of unity on an uneven grid
    let grid = make_tile_grid((23, 17), (8, 8), 3).unwrap();
    let ones: Vec<Latent> = grid
        .tiles
        .iter()
        .map(|t| Latent::ones((2, 1, t.h, t.w)))
        .collect();
    for weighting in [TileWeighting::Uniform, TileWeighting::Feathered] {
        let fused = fuse_tiles(&ones, &grid, weighting).unwrap();
        let err = fused.iter().fold(0.0f64, |m, &v| m.max((v - 1.0).abs()));
        assert!(err < PARTITION_EPS, "partition of unity, err {err}");
    }

    // a single covering tile reproduces the untiled step bit for bit
    let oracle = OracleDenoiser {
        oracle: GaussianOracle::new(
            Latent::from_elem(shape, 0.1),
            Latent::from_elem(shape, 0.5),
        )
        .unwrap(),
        schedule: schedule.clone(),
    };
    let single = make_tile_grid((8, 8), (8, 8), 0).unwrap();
    let cond = Latent::zeros(shape);
    for k in [1, 20, 50] {
        let tiled = per_tile_evds(
            &oracle,
            &z,
            k,
            &cond,
            &cond,
            &schedule,
            &single,
            TileWeighting::Uniform,
        )
        .unwrap();
        let direct = ddim_step(&z, &oracle.predict_noise(&z, k, &cond, &cond), k, &schedule).unwrap();
        assert_eq!(tiled, direct, "single tile differs from untiled at k={k}");
    }

    // frame-order reversal is an involution
    assert_eq!(flip_temporal(&flip_temporal(&z)), z);
    println!("criterion 03 (exact identities): PASS");
}

fn tiny_cfg() -> DenoiserConfig {
    DenoiserConfig {
        latent_channels: 1,
        event_channels: 4,
        stack_channels: 4,
        hidden: 5,
        blocks: 2,
        embed_dim: 4,
        encoder_downsample: 1,
        n_steps: 10,
    }
}

#[test]
fn criterion_04_fresh_adapter_is_exact_identity_and_base_stays_frozen() {
    let cfg = tiny_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let base = BaseDenoiser::new(&cfg, &mut rng).unwrap();
    let module = ControlModule::from_base(&base, &mut rng).unwrap();
    let plain = AdaptedModel {
        base: &base,
        branch: None,
    };
    let adapted = AdaptedModel {
        base: &base,
        branch: Some(&module.branch),
    };
    let shape = (3, 1, 8, 8);
    for _ in 0..10 {
        let z = sample_noise(shape, &mut rng);
        let i_cond = sample_noise(shape, &mut rng);
        let e_cond = sample_noise((3, 4, 8, 8), &mut rng);
        let k = rng.gen_range(1..=cfg.n_steps);
        assert_eq!(
            plain.predict_noise(&z, k, &i_cond, &e_cond),
            adapted.predict_noise(&z, k, &i_cond, &e_cond),
            "zero-initialized injections must not change the output"
        );
    }

    // 100 adaptation steps leave the base parameters untouched
    let schedule = NoiseSchedule::make(10, 1e-3, 0.3).unwrap();
    let samples: Vec<TrainSample> = (0..2)
        .map(|_| TrainSample {
            x0: sample_noise(shape, &mut rng),
            i_cond: sample_noise(shape, &mut rng),
            stacks: sample_noise((3, 4, 8, 8), &mut rng),
        })
        .collect();
    let tc = TrainConfig {
        steps: 100,
        batch: 2,
        lr: 1e-3,
        seed: 104,
        log_every: 50,
    };
    let hash_before = param_hash(&base);
    let mut module = module;
    let mut opt = evdi_core::adapter::Adam::new(module.n_params(), tc.lr);
    adapt_steps(&base, &mut module, &mut opt, &samples, &schedule, &tc, 0).unwrap();
    assert_eq!(param_hash(&base), hash_before, "base changed during adaptation");
    println!("criterion 04 (identity at init, frozen base): PASS");
}

/// Central-difference gradient check over every parameter of `net` against
/// `analytic`, where `loss` recomputes the scalar objective.
fn fd_max_rel_err<P: ParamTensors>(
    net: &mut P,
    analytic: &[f64],
    mut loss: impl FnMut(&P) -> f64,
) -> f64 {
    let params = net.flatten();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let mut p = params.clone();
        p[i] += FD_STEP;
        net.load_flat(&p).unwrap();
        let up = loss(net);
        p[i] -= 2.0 * FD_STEP;
        net.load_flat(&p).unwrap();
        let down = loss(net);
        let numeric = (up - down) / (2.0 * FD_STEP);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    net.load_flat(&params).unwrap();
    worst
}

fn mse_and_grad(pred: &Latent, target: &Latent) -> (f64, Latent) {
    let n = target.len() as f64;
    let diff = pred - target;
    ((&diff * &diff).sum() / n, diff * (2.0 / n))
}

#[test]
fn criterion_05_analytic_gradients_match_finite_differences() {
    let configs = [
        DenoiserConfig {
            latent_channels: 1,
            event_channels: 2,
            stack_channels: 2,
            hidden: 3,
            blocks: 1,
            embed_dim: 2,
            encoder_downsample: 1,
            n_steps: 5,
        },
        DenoiserConfig {
            latent_channels: 2,
            event_channels: 3,
            stack_channels: 4,
            hidden: 4,
            blocks: 2,
            embed_dim: 4,
            encoder_downsample: 2,
            n_steps: 8,
        },
        tiny_cfg(),
    ];
    for (i, cfg) in configs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(105 + i as u64);
        let mut base = BaseDenoiser::new(cfg, &mut rng).unwrap();
        let mut module = ControlModule::from_base(&base, &mut rng).unwrap();
        // break the zero projections so their gradients are exercised from
        // a generic point
        let mut p = module.flatten();
        for (j, v) in p.iter_mut().enumerate() {
            if *v == 0.0 {
                *v = 0.01 * ((j % 13) as f64 - 6.0);
            }
        }
        module.load_flat(&p).unwrap();

        let shape = (2, cfg.latent_channels, 6, 6);
        let z = sample_noise(shape, &mut rng);
        let i_cond = sample_noise(shape, &mut rng);
        let raw = sample_noise(
            (
                2,
                cfg.stack_channels,
                6 * cfg.encoder_downsample,
                6 * cfg.encoder_downsample,
            ),
            &mut rng,
        );
        let target = sample_noise(shape, &mut rng);
        let k = 3;

        // base network gradient
        let mut base_grad = zeroed(&base);
        let (pred, cache) = base.forward(&z, &i_cond, k, None);
        let (_, g_eps) = mse_and_grad(&pred, &target);
        base.backward(&cache, &g_eps, Some(&mut base_grad));
        let err = fd_max_rel_err(&mut base, &base_grad.flatten(), |net| {
            let (pred, _) = net.forward(&z, &i_cond, k, None);
            mse_and_grad(&pred, &target).0
        });
        assert!(err < GRAD_REL_TOL, "base instance {i}: max rel err {err}");

        // control module gradient through residual injection
        let zcat = ndarray::concatenate(ndarray::Axis(1), &[z.view(), i_cond.view()])
            .unwrap()
            .as_standard_layout()
            .to_owned();
        let full_loss = |m: &ControlModule| -> f64 {
            let (e_cond, _) = m.encoder.forward(&raw);
            let (res, _) = m.branch.forward(&zcat, &e_cond, &base.phi(k));
            let (pred, _) = base.forward(&z, &i_cond, k, Some(&res));
            mse_and_grad(&pred, &target).0
        };
        let mut grad = zeroed(&module);
        let (e_cond, enc_cache) = module.encoder.forward(&raw);
        let (res, br_cache) = module.branch.forward(&zcat, &e_cond, &base.phi(k));
        let (pred, base_cache) = base.forward(&z, &i_cond, k, Some(&res));
        let (_, g_eps) = mse_and_grad(&pred, &target);
        let g_res = base.backward(&base_cache, &g_eps, None);
        let g_e = module.branch.backward(&br_cache, &g_res, &mut grad.branch);
        module.encoder.backward(&enc_cache, &g_e, &mut grad.encoder);
        let err = fd_max_rel_err(&mut module, &grad.flatten(), full_loss);
        assert!(err < GRAD_REL_TOL, "control instance {i}: max rel err {err}");
    }
    println!("criterion 05 (gradients match finite differences): PASS");
}

// ---------------------------------------------------------------------------
// trained fixture: one disc, three paths, identical endpoint keyframes
// ---------------------------------------------------------------------------

const FIX_CANVAS: u16 = 32;
const FIX_FRAMES: usize = 8;
const FIX_SKIP: usize = 31;
const FIX_DURATION_US: u64 = 32_000;
const FIX_RATE_HZ: f64 = 1000.0;

fn fixture_scene(arc: f64) -> SceneSpec {
    let duration_s = FIX_DURATION_US as f64 / 1e6;
    let trajectory = if arc == 0.0 {
        Trajectory::Linear {
            start: (8.0, 16.0),
            velocity: (16.0 / duration_s, 0.0),
        }
    } else {
        Trajectory::Sinusoidal {
            start: (8.0, 16.0),
            velocity: (16.0 / duration_s, 0.0),
            amplitude: (0.0, arc),
            frequency_hz: 0.5 / duration_s,
            phase: 0.0,
        }
    };
    SceneSpec {
        width: FIX_CANVAS,
        height: FIX_CANVAS,
        background: 0.85,
        objects: vec![ObjectSpec {
            shape: Shape::Disc,
            size: 3.5,
            intensity: 0.1,
            trajectory,
        }],
        duration_us: FIX_DURATION_US,
        render_rate_hz: FIX_RATE_HZ,
        seed: 9,
    }
}

struct Trained {
    clips: Vec<DatasetClip>,
    base: BaseDenoiser,
    control: ControlModule,
    schedule: NoiseSchedule,
    sampling: SamplingConfig,
}

fn fixture_sampling() -> SamplingConfig {
    SamplingConfig {
        codec: CodecConfig::default(),
        stacker: StackerConfig::default(),
        tile: 16,
        overlap: 8,
        frames: FIX_FRAMES,
        seed: 11,
        weighting: TileWeighting::Uniform,
        orientation: FusionOrientation::StartHeavy,
        invert_backward_polarity: true,
        forward_weight_override: None,
    }
}

fn encode_span(images: &[&Image], codec: &CodecConfig) -> Latent {
    let ups: Vec<Image> = images
        .iter()
        .map(|im| bilinear_upsample(im, codec.upsample))
        .collect();
    let mut lat = encode(&ups, codec).unwrap();
    lat.data.mapv_inplace(|v| 2.0 * v - 1.0);
    lat.data
}

fn repeat_first(x: &Latent) -> Latent {
    let (f, c, h, w) = x.dim();
    let mut out = Array4::zeros((f, c, h, w));
    for i in 0..f {
        out.slice_mut(s![i, .., .., ..]).assign(&x.slice(s![0, .., .., ..]));
    }
    out
}

fn stacks_to_array(stacks: &[ndarray::Array3<f64>]) -> Array4<f64> {
    let (c, h, w) = stacks[0].dim();
    let mut out = Array4::zeros((stacks.len(), c, h, w));
    for (f, st) in stacks.iter().enumerate() {
        out.slice_mut(s![f, .., .., ..]).assign(st);
    }
    out
}

fn clip_span_times(clip: &DatasetClip) -> Vec<u64> {
    span_frame_indices(clip.skip, FIX_FRAMES)
        .into_iter()
        .map(|i| clip.gt_times[i])
        .collect()
}

fn fixture_samples(clips: &[DatasetClip], sampling: &SamplingConfig, with_events: bool) -> Vec<TrainSample> {
    let mut samples = Vec::new();
    for clip in clips {
        let idxs = span_frame_indices(clip.skip, FIX_FRAMES);
        let times = clip_span_times(clip);
        let images: Vec<&Image> = idxs.iter().map(|&i| &clip.ground_truth[i]).collect();
        let x0 = encode_span(&images, &sampling.codec);
        let i_cond = repeat_first(&x0);
        if !with_events {
            let (h, w) = (FIX_CANVAS as usize, FIX_CANVAS as usize);
            samples.push(TrainSample {
                x0,
                i_cond,
                stacks: Array4::zeros((FIX_FRAMES, sampling.stacker.channels(), h, w)),
            });
            continue;
        }
        let stacks = stacks_to_array(
            &build_control_sequence(&clip.events, &times, &sampling.stacker).unwrap(),
        );
        let pivot = *times.last().unwrap();
        let reversed = clip
            .events
            .reverse_time(pivot, sampling.invert_backward_polarity)
            .unwrap();
        let back_times: Vec<u64> = times.iter().rev().map(|&t| pivot - t).collect();
        let back_stacks = stacks_to_array(
            &build_control_sequence(&reversed, &back_times, &sampling.stacker).unwrap(),
        );
        let x0_b = flip_temporal(&x0);
        let i_cond_b = repeat_first(&x0_b);
        samples.push(TrainSample { x0, i_cond, stacks });
        samples.push(TrainSample {
            x0: x0_b,
            i_cond: i_cond_b,
            stacks: back_stacks,
        });
    }
    samples
}

// bump when any fixture parameter changes so a stale cache is never reused
const FIXTURE_REV: u32 = 2;

static TRAINED: Lazy<Trained> = Lazy::new(|| {
    let esim = EsimConfig::default();
    let clips: Vec<DatasetClip> = [0.0, 4.0, -4.0]
        .iter()
        .map(|&arc| make_clip(&fixture_scene(arc), &esim, FIX_SKIP, 2).unwrap())
        .collect();
    // all three clips share the same endpoint keyframes
    for clip in &clips[1..] {
        assert_eq!(clip.keyframes[0], clips[0].keyframes[0]);
        assert_eq!(clip.keyframes[1], clips[0].keyframes[1]);
    }
    let sampling = fixture_sampling();
    let schedule = NoiseSchedule::make(30, 1e-3, 0.3).unwrap();
    let cfg = DenoiserConfig {
        latent_channels: 1,
        event_channels: 8,
        stack_channels: sampling.stacker.channels(),
        hidden: 12,
        blocks: 2,
        embed_dim: 8,
        encoder_downsample: 2,
        n_steps: schedule.n_steps(),
    };

    // training is deterministic, so a cached checkpoint from an earlier run
    // of this suite is equivalent to retraining
    let stem = std::path::PathBuf::from(env!("CARGO_TARGET_TMPDIR"))
        .join(format!("trained-fixture-r{FIXTURE_REV}"));
    if let Ok(loaded) = evdi_core::adapter::load_checkpoint(&stem) {
        if loaded.stage == "adapted" && loaded.schedule == schedule && loaded.base.cfg == cfg {
            if let Some(control) = loaded.control {
                return Trained {
                    clips,
                    base: loaded.base,
                    control,
                    schedule,
                    sampling,
                };
            }
        }
    }

    let pre_samples = fixture_samples(&clips, &sampling, false);
    let tc = TrainConfig {
        steps: 2500,
        batch: 4,
        lr: 2e-3,
        seed: 5,
        log_every: 500,
    };
    let (base, _, curve) = pretrain_base(&cfg, &pre_samples, &schedule, &tc).unwrap();
    assert!(curve.last().unwrap().loss.is_finite());
    let adapt_samples = fixture_samples(&clips, &sampling, true);
    let atc = TrainConfig { seed: 6, ..tc };
    let (control, _, curve) = train_adapter(&base, &adapt_samples, &schedule, &atc).unwrap();
    assert!(curve.last().unwrap().loss.is_finite());
    let _ = evdi_core::adapter::save_checkpoint(
        &stem,
        &evdi_core::adapter::CheckpointData {
            base: &base,
            control: Some(&control),
            schedule: &schedule,
            stage: "adapted",
            completed_steps: tc.steps + atc.steps,
            base_opt: None,
            control_opt: None,
        },
    );
    Trained {
        clips,
        base,
        control,
        schedule,
        sampling,
    }
});

/// Intensity-weighted centroid of the dark object on the light background.
fn dark_centroid(img: &Image, background: f64) -> (f64, f64) {
    let mut wsum = 0.0;
    let (mut cx, mut cy) = (0.0, 0.0);
    for ((y, x), &v) in img.indexed_iter() {
        let w = (background - v).max(0.0);
        wsum += w;
        cx += w * x as f64;
        cy += w * y as f64;
    }
    (cx / wsum.max(1e-12), cy / wsum.max(1e-12))
}

fn interpolate_clip(t: &Trained, clip: &DatasetClip, events: &EventStream) -> Vec<Image> {
    let model = PipelineModel {
        base: &t.base,
        control: Some(&t.control),
        schedule: &t.schedule,
    };
    let times = clip_span_times(clip);
    interpolate(
        &model,
        &t.sampling,
        &clip.keyframes[0],
        &clip.keyframes[1],
        events,
        &times,
    )
    .unwrap()
}

/// Mean PSNR over the hidden (non-keyframe) output frames.
fn hidden_frame_psnr(frames: &[Image], clip: &DatasetClip) -> f64 {
    let idxs = span_frame_indices(clip.skip, FIX_FRAMES);
    let mut total = 0.0;
    let mut n = 0;
    for f in 1..FIX_FRAMES - 1 {
        total += psnr(&frames[f], &clip.ground_truth[idxs[f]], 1.0).unwrap();
        n += 1;
    }
    total / n as f64
}

#[test]
fn criterion_06_events_disambiguate_motion() {
    let t = &*TRAINED;
    let mut with_events = 0.0;
    let mut without_events = 0.0;
    let mut blended = 0.0;
    for clip in &t.clips {
        let evented = interpolate_clip(t, clip, &clip.events);
        with_events += hidden_frame_psnr(&evented, clip);

        let empty = EventStream::empty(FIX_CANVAS, FIX_CANVAS);
        let blind = interpolate_clip(t, clip, &empty);
        without_events += hidden_frame_psnr(&blind, clip);

        // keyframe cross-fade baseline
        let blend_frames: Vec<Image> = (0..FIX_FRAMES)
            .map(|f| {
                let w = f as f64 / (FIX_FRAMES - 1) as f64;
                &clip.keyframes[0] * (1.0 - w) + &clip.keyframes[1] * w
            })
            .collect();
        blended += hidden_frame_psnr(&blend_frames, clip);

        // the object in the mid frame sits where this clip's events put it
        let idxs = span_frame_indices(clip.skip, FIX_FRAMES);
        let mid = FIX_FRAMES / 2;
        let (px, py) = dark_centroid(&evented[mid], 0.85);
        let (gx, gy) = dark_centroid(&clip.ground_truth[idxs[mid]], 0.85);
        let dist = (px - gx).hypot(py - gy);
        assert!(
            dist < CENTROID_TOL_PX,
            "centroid off by {dist:.2} px (got ({px:.1}, {py:.1}), want ({gx:.1}, {gy:.1}))"
        );
    }
    let n = t.clips.len() as f64;
    let (with_events, without_events, blended) =
        (with_events / n, without_events / n, blended / n);
    assert!(
        with_events > without_events + EVENT_GAIN_DB,
        "event conditioning {with_events:.2} dB vs event-free {without_events:.2} dB"
    );
    assert!(
        with_events > blended + EVENT_GAIN_DB,
        "event conditioning {with_events:.2} dB vs cross-fade {blended:.2} dB"
    );
    println!(
        "criterion 06 (events disambiguate motion): PASS \
         ({with_events:.2} dB vs {without_events:.2} / {blended:.2} dB)"
    );
}

#[test]
fn criterion_07_endpoints_and_forward_only_reduction() {
    let t = &*TRAINED;
    let clip = &t.clips[1];
    let frames = interpolate_clip(t, clip, &clip.events);

    // endpoint frames reach the codec's own reconstruction ceiling
    let mut report = Vec::new();
    for (frame, key) in [(&frames[0], &clip.keyframes[0]), (&frames[FIX_FRAMES - 1], &clip.keyframes[1])] {
        let ceiling =
            upsampled_roundtrip_psnr(key, &t.sampling.codec, t.sampling.codec.upsample).unwrap();
        let got = psnr(frame, key, 1.0).unwrap();
        assert!(
            got > ceiling - ENDPOINT_GAP_DB,
            "endpoint {got:.2} dB vs ceiling {ceiling:.2} dB"
        );
        report.push(format!("{got:.2}/{ceiling:.2} dB"));
    }

    // a constant forward weight of one makes interpolation identical to
    // one-sided generation
    let model = PipelineModel {
        base: &t.base,
        control: Some(&t.control),
        schedule: &t.schedule,
    };
    let mut cfg = t.sampling;
    cfg.forward_weight_override = Some(1.0);
    let times = clip_span_times(clip);
    let two_sided = interpolate(
        &model,
        &cfg,
        &clip.keyframes[0],
        &clip.keyframes[1],
        &clip.events,
        &times,
    )
    .unwrap();
    let one_sided = generate(&model, &cfg, &clip.keyframes[0], &clip.events, &times).unwrap();
    assert_eq!(two_sided, one_sided, "forward-only fusion must reduce to generation");
    println!(
        "criterion 07 (endpoint fidelity, forward-only reduction): PASS (endpoints vs ceiling: {})",
        report.join(", ")
    );
}

#[test]
fn criterion_08_pre_encode_upsampling_preserves_detail() {
    let n = 32;
    let grating = |period: f64, diag: bool| -> Image {
        Array2::from_shape_fn((n, n), |(y, x)| {
            let u = if diag { (x + y) as f64 } else { x as f64 };
            0.5 + 0.5 * (u * std::f64::consts::TAU / period).sin()
        })
    };
    let radial = Array2::from_shape_fn((n, n), |(y, x)| {
        let r = ((x as f64 - 15.5).powi(2) + (y as f64 - 15.5).powi(2)).sqrt();
        0.5 + 0.5 * (r * std::f64::consts::TAU / 5.0).sin()
    });
    let disc = Array2::from_shape_fn((n, n), |(y, x)| {
        let r = ((x as f64 - 15.5).powi(2) + (y as f64 - 15.5).powi(2)).sqrt();
        if r < 9.0 {
            0.1
        } else {
            0.9
        }
    });
    let suite: Vec<(&str, Image)> = vec![
        ("vertical grating, 6 px period", grating(6.0, false)),
        ("vertical grating, 4 px period", grating(4.0, false)),
        ("diagonal grating, 5 px period", grating(5.0, true)),
        ("radial rings", radial),
        ("disc edge", disc),
    ];
    let codec = CodecConfig::default(); // lossy 4x pooling
    for (name, img) in &suite {
        let direct = upsampled_roundtrip_psnr(img, &codec, 1).unwrap();
        let upsampled = upsampled_roundtrip_psnr(img, &codec, 2).unwrap();
        assert!(
            upsampled > direct + UPSAMPLE_GAIN_DB,
            "{name}: direct {direct:.2} dB, upsampled {upsampled:.2} dB"
        );
    }
    println!("criterion 08 (pre-encode upsampling preserves detail): PASS");
}

#[test]
fn criterion_09_stack_lengths_halve() {
    // 16 events at distinct pixels and timestamps: stack m keeps the
    // ceil(16 / 2^m) most recent
    let records: Vec<EventRecord> = (0..16)
        .map(|i| EventRecord {
            t: (i + 1) as u64,
            x: i as u16,
            y: 0,
            p: 1,
        })
        .collect();
    let stream = EventStream::new(16, 4, records).unwrap();
    let cfg = StackerConfig {
        stacks: 4,
        normalization: evdi_core::stacker::Normalization::PerStackMax,
    };
    let tensor = build_multistack(&stream, 0, 16, &cfg).unwrap();
    for m in 0..4 {
        let nonzero = tensor
            .index_axis(ndarray::Axis(0), 2 * m)
            .iter()
            .filter(|&&v| v > 0.0)
            .count();
        assert_eq!(nonzero, 16usize.div_ceil(1 << m), "stack {m}");
        // the most recent event is always included
        assert!(tensor[[2 * m, 0, 15]] > 0.0);
    }

    // ties at the cutoff timestamp are all included
    let records = vec![
        EventRecord { t: 1, x: 0, y: 0, p: 1 },
        EventRecord { t: 2, x: 1, y: 0, p: 1 },
        EventRecord { t: 2, x: 2, y: 0, p: 1 },
        EventRecord { t: 3, x: 3, y: 0, p: 1 },
    ];
    let stream = EventStream::new(4, 1, records).unwrap();
    let cfg = StackerConfig {
        stacks: 2,
        normalization: evdi_core::stacker::Normalization::PerStackMax,
    };
    let tensor = build_multistack(&stream, 0, 3, &cfg).unwrap();
    let nonzero = tensor
        .index_axis(ndarray::Axis(0), 2)
        .iter()
        .filter(|&&v| v > 0.0)
        .count();
    assert_eq!(nonzero, 3, "cutoff tie must include both same-time events");
    println!("criterion 09 (stack lengths halve): PASS");
}

#[test]
fn criterion_10_metric_reference_values() {
    // one 8-bit quantization step everywhere: 20 log10(255) dB
    let a = Array2::from_elem((32, 32), 0.5);
    let b = a.mapv(|v| v + 1.0 / 255.0);
    let p = psnr(&a, &b, 1.0).unwrap();
    assert!(
        (p - PSNR_REF_DB).abs() < PSNR_REF_TOL,
        "PSNR {p:.4} dB vs reference {PSNR_REF_DB}"
    );
    let pattern = Array2::from_shape_fn((32, 32), |(y, x)| {
        0.5 + 0.4 * ((x * 3 + y * 5) as f64 * 0.21).sin()
    });
    assert_eq!(ssim(&pattern, &pattern, 1.0).unwrap(), 1.0);
    println!("criterion 10 (metric reference values): PASS");
}
