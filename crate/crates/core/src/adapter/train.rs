//! Denoising-objective training: pretraining of the base network and
//! adaptation of the control module against a frozen base.
//!
//! Every random draw is derived from `(seed, step, lane)`, so a run is
//! reproducible bit for bit regardless of thread count, and a resumed run
//! continues exactly where a longer run would have been.

use ndarray::Array4;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::diffusion::{forward_diffuse, sample_noise, Latent, NoiseSchedule};
use crate::{Error, Result};

use super::layers::{zeroed, ParamTensors};
use super::network::{BaseDenoiser, ControlModule, DenoiserConfig};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Record a loss point every this many steps (and at the last step).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            batch: 4,
            lr: 1e-3,
            seed: 0,
            log_every: 25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// One paired training item: clean latent video, keyframe conditioning on
/// the same grid, and the raw stack tensor for the event encoder (all-zero
/// when the item carries no events).
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub x0: Latent,
    pub i_cond: Latent,
    pub stacks: Array4<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

/// Adam over the flat parameter vector of any [`ParamTensors`] container.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: usize,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn from_state(lr: f64, t: usize, m: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if m.len() != v.len() {
            return Err(Error::Argument("optimizer moment lengths differ".into()));
        }
        Ok(Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t,
            m,
            v,
        })
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn state(&self) -> (usize, &[f64], &[f64]) {
        (self.t, &self.m, &self.v)
    }

    pub fn step(&mut self, params: &mut dyn ParamTensors, grads: &dyn ParamTensors) -> Result<()> {
        let g = grads.flatten();
        let mut p = params.flatten();
        if g.len() != self.m.len() || p.len() != self.m.len() {
            return Err(Error::Argument(format!(
                "optimizer sized for {} parameters, got {} params / {} grads",
                self.m.len(),
                p.len(),
                g.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..p.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        params.load_flat(&p)
    }
}

/// SHA-256 over the little-endian bytes of the flat parameter vector.
pub fn param_hash(params: &dyn ParamTensors) -> String {
    let mut hasher = Sha256::new();
    params.visit(&mut |_, s| {
        for v in s {
            hasher.update(v.to_le_bytes());
        }
    });
    format!("{:x}", hasher.finalize())
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn lane_rng(seed: u64, step: usize, lane: usize) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mixed = splitmix(splitmix(seed ^ 0x5eed_0000) ^ splitmix(step as u64) ^ (lane as u64) << 32);
    rand_chacha::ChaCha8Rng::seed_from_u64(mixed)
}

struct LaneDraw {
    sample: usize,
    k: usize,
    eps: Latent,
}

fn draw_lane(
    seed: u64,
    step: usize,
    lane: usize,
    n_samples: usize,
    shape: (usize, usize, usize, usize),
    schedule: &NoiseSchedule,
) -> LaneDraw {
    use rand::Rng;
    let mut rng = lane_rng(seed, step, lane);
    LaneDraw {
        sample: rng.gen_range(0..n_samples),
        k: rng.gen_range(1..=schedule.n_steps()),
        eps: sample_noise(shape, &mut rng),
    }
}

fn check_samples(samples: &[TrainSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Argument("training needs at least one sample".into()));
    }
    let shape = samples[0].x0.dim();
    for s in samples {
        if s.x0.dim() != shape || s.i_cond.dim() != shape {
            return Err(Error::Argument(
                "all training samples must share one latent shape".into(),
            ));
        }
    }
    Ok(())
}

fn mse_and_grad(pred: &Latent, eps: &Latent) -> (f64, Latent) {
    let n = eps.len() as f64;
    let diff = pred - eps;
    let loss = diff.iter().map(|&d| d * d).sum::<f64>() / n;
    (loss, diff * (2.0 / n))
}

/// Run `steps` pretraining updates on the base network, resuming at
/// `start_step`. Gradients are averaged over the batch in lane order, so the
/// result does not depend on the rayon thread count.
pub fn pretrain_steps(
    base: &mut BaseDenoiser,
    opt: &mut Adam,
    samples: &[TrainSample],
    schedule: &NoiseSchedule,
    tc: &TrainConfig,
    start_step: usize,
) -> Result<Vec<LossPoint>> {
    tc.validate()?;
    check_samples(samples)?;
    let shape = samples[0].x0.dim();
    let mut curve = Vec::new();
    for step in start_step..start_step + tc.steps {
        let frozen = &*base;
        let results: Vec<(f64, BaseDenoiser)> = (0..tc.batch)
            .into_par_iter()
            .map(|lane| {
                let draw = draw_lane(tc.seed, step, lane, samples.len(), shape, schedule);
                let s = &samples[draw.sample];
                let z = forward_diffuse(&s.x0, draw.k, &draw.eps, schedule)
                    .expect("shapes checked above");
                let (pred, cache) = frozen.forward(&z, &s.i_cond, draw.k, None);
                let (loss, g_eps) = mse_and_grad(&pred, &draw.eps);
                let mut grad = zeroed(frozen);
                frozen.backward(&cache, &g_eps, Some(&mut grad));
                (loss, grad)
            })
            .collect();
        let mut mean_loss = 0.0;
        let mut total = zeroed(base);
        let mut acc = total.flatten();
        for (loss, grad) in &results {
            mean_loss += loss;
            for (a, g) in acc.iter_mut().zip(grad.flatten()) {
                *a += g;
            }
        }
        mean_loss /= tc.batch as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Training {
                step,
                msg: format!("non-finite loss {mean_loss}"),
            });
        }
        let scale = 1.0 / tc.batch as f64;
        acc.iter_mut().for_each(|a| *a *= scale);
        total.load_flat(&acc)?;
        opt.step(base, &total)?;
        if (step + 1) % tc.log_every == 0 || step + 1 == start_step + tc.steps {
            curve.push(LossPoint {
                step: step + 1,
                loss: mean_loss,
            });
        }
    }
    Ok(curve)
}

/// Initialize and pretrain a base network from scratch.
pub fn pretrain_base(
    cfg: &DenoiserConfig,
    samples: &[TrainSample],
    schedule: &NoiseSchedule,
    tc: &TrainConfig,
) -> Result<(BaseDenoiser, Adam, Vec<LossPoint>)> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(tc.seed);
    let mut base = BaseDenoiser::new(cfg, &mut rng)?;
    let mut opt = Adam::new(base.n_params(), tc.lr);
    let curve = pretrain_steps(&mut base, &mut opt, samples, schedule, tc, 0)?;
    Ok((base, opt, curve))
}

/// Run `steps` adaptation updates on the control module. The base network is
/// read-only here; a parameter hash taken before and after guards the freeze
/// contract.
pub fn adapt_steps(
    base: &BaseDenoiser,
    module: &mut ControlModule,
    opt: &mut Adam,
    samples: &[TrainSample],
    schedule: &NoiseSchedule,
    tc: &TrainConfig,
    start_step: usize,
) -> Result<Vec<LossPoint>> {
    tc.validate()?;
    check_samples(samples)?;
    let base_hash = param_hash(base);
    let shape = samples[0].x0.dim();
    let mut curve = Vec::new();
    for step in start_step..start_step + tc.steps {
        let frozen = &*module;
        let results: Vec<(f64, ControlModule)> = (0..tc.batch)
            .into_par_iter()
            .map(|lane| {
                let draw = draw_lane(tc.seed, step, lane, samples.len(), shape, schedule);
                let s = &samples[draw.sample];
                let z = forward_diffuse(&s.x0, draw.k, &draw.eps, schedule)
                    .expect("shapes checked above");
                let (e_cond, enc_cache) = frozen.encoder.forward(&s.stacks);
                let zcat = ndarray::concatenate(
                    ndarray::Axis(1),
                    &[z.view(), s.i_cond.view()],
                )
                .expect("matching dims")
                .as_standard_layout()
                .to_owned();
                let phi = base.phi(draw.k);
                let (residuals, br_cache) = frozen.branch.forward(&zcat, &e_cond, &phi);
                let (pred, base_cache) = base.forward(&z, &s.i_cond, draw.k, Some(&residuals));
                let (loss, g_eps) = mse_and_grad(&pred, &draw.eps);
                let g_res = base.backward(&base_cache, &g_eps, None);
                let mut grad = zeroed(frozen);
                let g_e = frozen.branch.backward(&br_cache, &g_res, &mut grad.branch);
                frozen.encoder.backward(&enc_cache, &g_e, &mut grad.encoder);
                (loss, grad)
            })
            .collect();
        let mut mean_loss = 0.0;
        let mut total = zeroed(module);
        let mut acc = total.flatten();
        for (loss, grad) in &results {
            mean_loss += loss;
            for (a, g) in acc.iter_mut().zip(grad.flatten()) {
                *a += g;
            }
        }
        mean_loss /= tc.batch as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Training {
                step,
                msg: format!("non-finite loss {mean_loss}"),
            });
        }
        let scale = 1.0 / tc.batch as f64;
        acc.iter_mut().for_each(|a| *a *= scale);
        total.load_flat(&acc)?;
        opt.step(module, &total)?;
        if (step + 1) % tc.log_every == 0 || step + 1 == start_step + tc.steps {
            curve.push(LossPoint {
                step: step + 1,
                loss: mean_loss,
            });
        }
    }
    if param_hash(base) != base_hash {
        return Err(Error::Training {
            step: start_step + tc.steps,
            msg: "base parameters changed during adaptation".into(),
        });
    }
    Ok(curve)
}

/// Initialize a control module from the base and adapt it.
pub fn train_adapter(
    base: &BaseDenoiser,
    samples: &[TrainSample],
    schedule: &NoiseSchedule,
    tc: &TrainConfig,
) -> Result<(ControlModule, Adam, Vec<LossPoint>)> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(splitmix(tc.seed ^ 0xadab));
    let mut module = ControlModule::from_base(base, &mut rng)?;
    let mut opt = Adam::new(module.n_params(), tc.lr);
    let curve = adapt_steps(base, &mut module, &mut opt, samples, schedule, tc, 0)?;
    Ok((module, opt, curve))
}

/// Average denoising loss of a model over fixed pseudo-random draws; the
/// items carry an already-encoded event tensor.
pub fn mean_eval_loss(
    denoiser: &dyn crate::diffusion::Denoiser,
    items: &[(Latent, Latent, Latent)],
    schedule: &NoiseSchedule,
    reps: usize,
    seed: u64,
) -> Result<f64> {
    use rand::SeedableRng;
    if items.is_empty() || reps == 0 {
        return Err(Error::Argument("evaluation needs items and reps".into()));
    }
    let mut total = 0.0;
    let mut n = 0;
    for (i, (x0, i_cond, e_cond)) in items.iter().enumerate() {
        for r in 0..reps {
            let mut rng =
                rand_chacha::ChaCha8Rng::seed_from_u64(splitmix(seed) ^ splitmix((i * 1000 + r) as u64));
            total +=
                crate::diffusion::training_loss(denoiser, x0, i_cond, e_cond, schedule, &mut rng)?;
            n += 1;
        }
    }
    Ok(total / n as f64)
}
